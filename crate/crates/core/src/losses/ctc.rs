//! Connectionist temporal classification loss, computed with the
//! log-space forward-backward recursion over the blank-interleaved label
//! sequence. The gradient with respect to the raw logits is produced in
//! the same pass and attached to the tape as a fused node.

use crate::diffcore::kernels::{log_add, log_softmax_into};
use crate::diffcore::{Array, Var};

use super::LossError;

pub const BLANK: usize = 0;

/// Fewest frames that can emit `target` (one per label plus a blank
/// between every pair of equal neighbours).
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under `T x K` logits.
pub fn ctc_loss(logits: &Array, target: &[usize]) -> Result<f64, LossError> {
    let (t, k) = dims(logits)?;
    Ok(ctc_nll_and_grad(logits.data(), t, k, target, false)?.0)
}

/// Tape version of [`ctc_loss`] for a single `T x K` sequence.
pub fn ctc_loss_var<'t>(logits: Var<'t>, target: &[usize]) -> Result<Var<'t>, LossError> {
    let value = logits.value();
    let (t, k) = dims(&value)?;
    let (nll, grad) = ctc_nll_and_grad(value.data(), t, k, target, false)?;
    Ok(logits
        .tape()
        .precomputed(logits, nll, Array::new(&[t, k], grad)?)?)
}

/// Mean CTC loss over a padded `[B, T, K]` batch; frames at or beyond
/// `lengths[b]` are ignored.
pub fn ctc_batch_var<'t>(
    logits: Var<'t>,
    lengths: &[usize],
    targets: &[Vec<usize>],
) -> Result<Var<'t>, LossError> {
    let value = logits.value();
    let shape = value.shape().to_vec();
    let [b, t, k] = shape[..] else {
        return Err(LossError::Shape(format!("ctc batch expects [B, T, K], got {shape:?}")));
    };
    if lengths.len() != b || targets.len() != b {
        return Err(LossError::LengthMismatch {
            what: "ctc batch",
            left: b,
            right: lengths.len().min(targets.len()),
        });
    }
    let mut grad = vec![0.0; b * t * k];
    let mut total = 0.0;
    let scale = 1.0 / b as f64;
    for bi in 0..b {
        let len = lengths[bi];
        if len > t {
            return Err(LossError::Shape(format!("length {len} exceeds padded T {t}")));
        }
        let base = bi * t * k;
        let (nll, g) = ctc_nll_and_grad(&value.data()[base..base + len * k], len, k, &targets[bi], false)?;
        total += nll * scale;
        for (dst, v) in grad[base..base + len * k].iter_mut().zip(&g) {
            *dst = v * scale;
        }
    }
    Ok(logits
        .tape()
        .precomputed(logits, total, Array::new(&shape, grad)?)?)
}

fn dims(logits: &Array) -> Result<(usize, usize), LossError> {
    match logits.shape() {
        [t, k] => Ok((*t, *k)),
        s => Err(LossError::Shape(format!("ctc expects [T, K] logits, got {s:?}"))),
    }
}

/// Returns the loss and its gradient with respect to the raw logits.
///
/// `extended_label_fault` drops the trailing blank of the extended label
/// sequence. It exists only so the verification suite can prove that it
/// detects a broken recursion.
#[doc(hidden)]
pub fn ctc_nll_and_grad(
    logits: &[f64],
    t: usize,
    k: usize,
    target: &[usize],
    extended_label_fault: bool,
) -> Result<(f64, Vec<f64>), LossError> {
    if let Some(pos) = target.iter().position(|&c| c == BLANK) {
        return Err(LossError::BlankInTarget { position: pos });
    }
    if let Some(&tok) = target.iter().find(|&&c| c >= k) {
        return Err(LossError::TokenOutOfRange { token: tok, classes: k });
    }
    let required = min_frames(target);
    if t < required || t == 0 {
        return Err(LossError::NoValidPath { frames: t, required });
    }

    let mut logp = vec![0.0; t * k];
    for (src, dst) in logits.chunks(k).zip(logp.chunks_mut(k)) {
        log_softmax_into(src, dst);
    }

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &c in target {
        ext.push(c);
        ext.push(BLANK);
    }
    if extended_label_fault && ext.len() > 1 {
        ext.pop();
    }
    let s_len = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; t * s_len];
    alpha[0] = logp[ext[0]];
    if s_len > 1 {
        alpha[1] = logp[ext[1]];
    }
    for ti in 1..t {
        for s in 0..s_len {
            let prev = &alpha[(ti - 1) * s_len..ti * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[ti * s_len + s] = if a == neg { neg } else { a + logp[ti * k + ext[s]] };
        }
    }

    let mut beta = vec![neg; t * s_len];
    let last = (t - 1) * s_len;
    beta[last + s_len - 1] = logp[(t - 1) * k + ext[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = logp[(t - 1) * k + ext[s_len - 2]];
    }
    for ti in (0..t - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(ti + 1) * s_len..(ti + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[ti * s_len + s] = if b == neg { neg } else { b + logp[ti * k + ext[s]] };
        }
    }

    let mut log_z = alpha[last + s_len - 1];
    if s_len > 1 {
        log_z = log_add(log_z, alpha[last + s_len - 2]);
    }
    if log_z == neg {
        return Err(LossError::NoValidPath { frames: t, required });
    }

    let mut grad = vec![0.0; t * k];
    let mut occupancy = vec![neg; k];
    for ti in 0..t {
        occupancy.iter_mut().for_each(|o| *o = neg);
        for s in 0..s_len {
            let ab = alpha[ti * s_len + s] + beta[ti * s_len + s];
            occupancy[ext[s]] = log_add(occupancy[ext[s]], ab);
        }
        for c in 0..k {
            let lp = logp[ti * k + c];
            let posterior = if occupancy[c] == neg {
                0.0
            } else {
                (occupancy[c] - lp - log_z).exp()
            };
            grad[ti * k + c] = lp.exp() - posterior;
        }
    }
    Ok((-log_z, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_uniform() {
        let logits = Array::zeros(&[1, 3]);
        let l = ctc_loss(&logits, &[2]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        // (a,a), (blank,a), (a,blank) out of 4 equally likely paths
        let logits = Array::zeros(&[2, 2]);
        let l = ctc_loss(&logits, &[1]).unwrap();
        assert!((l - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((l - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn infeasible_and_invalid_targets() {
        let logits = Array::zeros(&[1, 3]);
        assert_eq!(
            ctc_loss(&logits, &[1, 2]),
            Err(LossError::NoValidPath { frames: 1, required: 2 })
        );
        let logits = Array::zeros(&[2, 3]);
        assert!(matches!(
            ctc_loss(&logits, &[1, 1]),
            Err(LossError::NoValidPath { required: 3, .. })
        ));
        assert!(matches!(ctc_loss(&logits, &[0]), Err(LossError::BlankInTarget { .. })));
        assert!(matches!(ctc_loss(&logits, &[3]), Err(LossError::TokenOutOfRange { .. })));
    }

    #[test]
    fn empty_target_is_all_blank() {
        let logits = Array::new(&[2, 2], vec![0.5, -0.5, 1.0, 2.0]).unwrap();
        let l = ctc_loss(&logits, &[]).unwrap();
        let lp0 = 0.5 - (0.5f64.exp() + (-0.5f64).exp()).ln();
        let lp1 = 1.0 - (1f64.exp() + 2f64.exp()).ln();
        assert!((l + lp0 + lp1).abs() < 1e-12);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Array::new(&[4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (_, g) = ctc_nll_and_grad(logits.data(), 4, 3, &[1, 2], false).unwrap();
        for row in g.chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn fault_changes_the_loss() {
        let logits = Array::zeros(&[3, 3]);
        let good = ctc_nll_and_grad(logits.data(), 3, 3, &[1], false).unwrap().0;
        let bad = ctc_nll_and_grad(logits.data(), 3, 3, &[1], true).unwrap().0;
        assert!((good - bad).abs() > 1e-3);
    }
}
