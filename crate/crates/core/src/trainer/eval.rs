use std::time::Instant;

use crate::data_synth::Utterance;
use crate::decode_metrics::{cer, summarize, CorpusSummary, Hypothesis, UtteranceRecord};
use crate::linguistics::Lexicon;
use crate::model::{ActivationConfig, DecodeMethod, Model, ModelError};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub records: Vec<UtteranceRecord>,
    /// One per activation, without timings.
    pub summaries: Vec<CorpusSummary>,
    /// Best-of-repeats seconds to decode the corpus, per activation.
    pub latency: Vec<(ActivationConfig, f64)>,
}

fn render(tokens: &[usize], lexicon: &Lexicon) -> String {
    tokens
        .iter()
        .map(|&t| match t.checked_sub(1).filter(|&i| i < lexicon.len()) {
            Some(i) => lexicon.entry(i).character,
            None => '?',
        })
        .collect()
}

/// Decodes every utterance under every activation config. For timing,
/// each utterance is decoded `timing_repeats` times per config with the
/// configs interleaved; the per-utterance minimum is kept and summed over
/// the corpus, which filters out scheduler noise.
pub fn evaluate(
    model: &Model,
    corpus: &[Utterance],
    lexicon: &Lexicon,
    activations: &[ActivationConfig],
    method: DecodeMethod,
    timing_repeats: usize,
) -> Result<EvalOutput, ModelError> {
    let mut hyps: Vec<Vec<Hypothesis>> = vec![Vec::with_capacity(corpus.len()); activations.len()];
    let mut total = vec![0.0; activations.len()];
    for u in corpus {
        let mut best = vec![f64::INFINITY; activations.len()];
        for rep in 0..timing_repeats.max(1) {
            for (ai, &act) in activations.iter().enumerate() {
                let start = Instant::now();
                let h = model.forward_infer(&u.features, act, method)?;
                best[ai] = best[ai].min(start.elapsed().as_secs_f64());
                if rep == 0 {
                    hyps[ai].push(h);
                }
            }
        }
        for (t, b) in total.iter_mut().zip(best) {
            *t += b;
        }
    }
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for (ai, &act) in activations.iter().enumerate() {
        let first = records.len();
        for (u, h) in corpus.iter().zip(&hyps[ai]) {
            let reference: Vec<usize> = u.labels.chars.iter().map(|&c| c + 1).collect();
            let Ok(rep) = cer(&reference, &h.tokens) else { continue };
            let mut rec = UtteranceRecord::new(u.id.clone(), act, lexicon.text_of(&u.labels.chars), render(&h.tokens, lexicon), rep);
            rec.branch_frames = h.branch_frames.clone();
            records.push(rec);
        }
        summaries.push(summarize(act, &records[first..], model.count_active_params(act), None));
    }
    Ok(EvalOutput {
        records,
        summaries,
        latency: activations.iter().copied().zip(total).collect(),
    })
}
