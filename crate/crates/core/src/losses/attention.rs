use crate::diffcore::kernels::log_softmax_into;
use crate::diffcore::{Array, Var};

use super::LossError;

/// Mean over positions of `-log softmax(logits[l])[target[l]]`.
pub fn attention_ce_loss(logits: &Array, target: &[usize]) -> Result<f64, LossError> {
    let (l, k) = match logits.shape() {
        [l, k] => (*l, *k),
        s => return Err(LossError::Shape(format!("expected [L, K] logits, got {s:?}"))),
    };
    if l != target.len() {
        return Err(LossError::LengthMismatch {
            what: "attention targets",
            left: l,
            right: target.len(),
        });
    }
    check_tokens(target, k)?;
    let mut row = vec![0.0; k];
    let mut total = 0.0;
    for (src, &y) in logits.data().chunks(k).zip(target) {
        log_softmax_into(src, &mut row);
        total -= row[y];
    }
    Ok(total / l.max(1) as f64)
}

/// Batched teacher-forced cross-entropy over padded `[B, L, K]` logits:
/// the mean over batch of each sequence's mean over its valid positions.
pub fn attention_ce_batch_var<'t>(logits: Var<'t>, targets: &[Vec<usize>]) -> Result<Var<'t>, LossError> {
    let shape = logits.shape();
    let [b, l, k] = shape[..] else {
        return Err(LossError::Shape(format!("expected [B, L, K] logits, got {shape:?}")));
    };
    if targets.len() != b {
        return Err(LossError::LengthMismatch {
            what: "attention batch",
            left: b,
            right: targets.len(),
        });
    }
    let mut indices = vec![0usize; b * l];
    let mut weights = vec![0.0; b * l];
    for (bi, tgt) in targets.iter().enumerate() {
        if tgt.len() > l || tgt.is_empty() {
            return Err(LossError::LengthMismatch {
                what: "attention target length",
                left: l,
                right: tgt.len(),
            });
        }
        check_tokens(tgt, k)?;
        let w = -1.0 / (tgt.len() as f64 * b as f64);
        for (pos, &y) in tgt.iter().enumerate() {
            indices[bi * l + pos] = y;
            weights[bi * l + pos] = w;
        }
    }
    let tape = logits.tape();
    let picked = logits
        .reshape(&[b * l, k])?
        .log_softmax()?
        .select_per_row(&indices)?;
    Ok(picked.mul(tape.constant(Array::from_vec(weights)))?.sum()?)
}

fn check_tokens(target: &[usize], k: usize) -> Result<(), LossError> {
    match target.iter().find(|&&y| y >= k) {
        Some(&token) => Err(LossError::TokenOutOfRange { token, classes: k }),
        None => Ok(()),
    }
}
