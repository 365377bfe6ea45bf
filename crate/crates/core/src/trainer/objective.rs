use crate::decode_metrics::frame_argmax;
use crate::diffcore::Var;
use crate::linguistics::LinguisticInventory;
use crate::losses::{
    align_loss_var, attention_ce_batch_var, ctc_batch_var, total_loss, LossBundle, LossComponents, LossConfig, LossError, MappingSource,
};
use crate::model::{Batch, Bound, DropMasks, Fusion, Model, ModelError};

use super::TrainError;

pub struct LossOutput<'t> {
    pub total: Var<'t>,
    pub bundle: LossBundle,
}

fn component(component: &'static str) -> impl Fn(LossError) -> TrainError {
    move |source| TrainError::Component {
        step: 0,
        component,
        source,
    }
}

impl TrainError {
    pub(crate) fn at_step(self, at: usize) -> Self {
        match self {
            TrainError::Component { component, source, .. } => TrainError::Component {
                step: at,
                component,
                source,
            },
            other => other,
        }
    }
}

/// Per-frame argmax classes of `[B, T, K]` logits, cut to each length.
fn predicted_classes(logits: Var<'_>, lengths: &[usize]) -> Result<Vec<Vec<usize>>, ModelError> {
    let value = logits.value();
    let shape = value.shape().to_vec();
    let (t, k) = (shape[1], shape[2]);
    lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            let rows = value.data()[b * t * k..(b * t + len) * k].to_vec();
            Ok(frame_argmax(&crate::diffcore::Array::new(&[len, k], rows)?))
        })
        .collect()
}

/// Builds the training objective on the tape: hybrid char loss plus,
/// when the model has branches, the branch CTC losses and the alignment
/// loss. The scalar value is cross-checked against [`total_loss`].
pub fn compute_loss<'t>(
    model: &Model,
    p: &Bound<'t, '_>,
    batch: &Batch,
    masks: &DropMasks,
    cfg: &LossConfig,
    use_align: bool,
    inv: &LinguisticInventory,
) -> Result<LossOutput<'t>, TrainError> {
    let out = model.forward(p, batch, Fusion::Train(masks), true)?;
    let char_ctc = ctc_batch_var(out.char_ctc_logits, &batch.lengths, &batch.char_targets).map_err(component("char_ctc"))?;
    let eos = model.config().eos();
    let attn_targets: Vec<Vec<usize>> = batch
        .char_targets
        .iter()
        .map(|t| t.iter().copied().chain(std::iter::once(eos)).collect())
        .collect();
    let attn_logits = out.char_attn_logits.ok_or(ModelError::MissingTargets)?;
    let char_attn = attention_ce_batch_var(attn_logits, &attn_targets).map_err(component("char_attn"))?;

    let phoneme_ctc = out
        .phoneme_logits
        .map(|l| ctc_batch_var(l, &batch.lengths, &batch.phoneme_targets))
        .transpose()
        .map_err(component("phoneme_ctc"))?;
    let viseme_ctc = out
        .viseme_logits
        .map(|l| ctc_batch_var(l, &batch.lengths, &batch.viseme_targets))
        .transpose()
        .map_err(component("viseme_ctc"))?;

    let align = match (use_align, out.p, out.v, out.phoneme_logits, out.viseme_logits) {
        (true, Some(pr), Some(vr), Some(pl), Some(vl)) => {
            let (ph, vi) = match cfg.mapping_source {
                MappingSource::Predicted => (predicted_classes(pl, &batch.lengths)?, predicted_classes(vl, &batch.lengths)?),
                MappingSource::Labels => (batch.frame_phonemes.clone(), batch.frame_visemes.clone()),
            };
            Some(align_loss_var(vr, pr, &vi, &ph, inv, cfg).map_err(component("align"))?)
        }
        _ => None,
    };

    let comps = LossComponents {
        char_ctc: char_ctc.item(),
        char_attn: char_attn.item(),
        phoneme_ctc: phoneme_ctc.map(|v| v.item()),
        viseme_ctc: viseme_ctc.map(|v| v.item()),
        align: align.map(|v| v.item()),
    };
    let bundle = total_loss(&comps, cfg).map_err(component("total"))?;

    let diff = |e: crate::diffcore::DiffError| TrainError::Model(ModelError::Diff(e));
    let mut total = char_attn.scale(cfg.alpha).map_err(diff)?.add(char_ctc.scale(1.0 - cfg.alpha).map_err(diff)?).map_err(diff)?;
    if let Some(a) = align {
        total = total.add(a.scale(cfg.lambda1).map_err(diff)?).map_err(diff)?;
    }
    let branch = match (phoneme_ctc, viseme_ctc) {
        (Some(a), Some(b)) => Some(a.add(b).map_err(diff)?),
        (a, b) => a.or(b),
    };
    if let Some(s) = branch {
        total = total.add(s.scale(cfg.lambda2).map_err(diff)?).map_err(diff)?;
    }
    Ok(LossOutput { total, bundle })
}
