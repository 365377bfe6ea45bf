//! Semantic-guided local contrastive alignment between viseme and
//! phoneme branch features.
//!
//! For each sequence: frames `i` (viseme side) and `j` (phoneme side) are
//! positives when their classes agree under the phoneme→viseme map and
//! `|i - j| <= w / 2`. The model distribution `q(.|i)` is a temperature
//! softmax of cosine similarities restricted to the window; the target
//! `p(.|i)` is uniform over the positives. The loss is the mean over
//! active rows of `KL(p || q)`, averaged over the batch.

use crate::diffcore::{Array, Tape, Var, MASK_FILL};
use crate::linguistics::{build_mapping_matrix, build_window_mask, BinaryMatrix, LinguisticInventory};

use super::{LossConfig, LossError};

/// Cosine similarity `S[i][j] = cos(v_i, p_j)` of two `T x C` arrays.
pub fn similarity_matrix(v: &Array, p: &Array) -> Result<Array, LossError> {
    if v.shape() != p.shape() || v.rank() != 2 {
        return Err(LossError::Shape(format!(
            "similarity needs equal [T, C] inputs, got {:?} and {:?}",
            v.shape(),
            p.shape()
        )));
    }
    let tape = Tape::new();
    let s = similarity_var(tape.constant(v.clone()), tape.constant(p.clone()))?;
    Ok(s.value())
}

fn similarity_var<'t>(v: Var<'t>, p: Var<'t>) -> Result<Var<'t>, LossError> {
    let vn = v.l2_normalize()?;
    let pn = p.l2_normalize()?;
    Ok(vn.matmul(pn.transpose()?)?)
}

/// Positives: semantic agreement inside the local window.
pub fn positive_mask(mapping: &BinaryMatrix, window: &BinaryMatrix) -> Result<BinaryMatrix, LossError> {
    Ok(mapping.and(window)?)
}

/// `q[i][j] = exp(S_ij / tau) / sum_{k in window(i)} exp(S_ik / tau)`,
/// zero outside the window.
pub fn local_distribution(s: &Array, window: &BinaryMatrix, tau: f64) -> Result<Array, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    let n = window.size();
    if s.shape() != [n, n] {
        return Err(LossError::Shape(format!("similarity {:?} vs window {n}x{n}", s.shape())));
    }
    let tape = Tape::new();
    let outside: Vec<bool> = window.as_slice().iter().map(|&w| !w).collect();
    let q = tape
        .constant(s.clone())
        .scale(1.0 / tau)?
        .masked_fill(&outside, MASK_FILL)?
        .softmax()?;
    Ok(q.value())
}

/// Row-normalized positive mask and the rows that have any positive.
pub fn positive_distribution(positives: &BinaryMatrix) -> (Array, Vec<bool>) {
    let n = positives.size();
    let mut p = Array::zeros(&[n, n]);
    let mut active = vec![false; n];
    for i in 0..n {
        let count = positives.row(i).iter().filter(|&&b| b).count();
        if count == 0 {
            continue;
        }
        active[i] = true;
        let share = 1.0 / count as f64;
        for j in 0..n {
            if positives.get(i, j) {
                p.set(&[i, j], share);
            }
        }
    }
    (p, active)
}

/// Value-only alignment loss for `[B, T, C]` features. Each class
/// sequence's length gives that element's true (unpadded) frame count.
pub fn align_loss(
    v: &Array,
    p: &Array,
    viseme_frames: &[Vec<usize>],
    phoneme_frames: &[Vec<usize>],
    inv: &LinguisticInventory,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    let tape = Tape::new();
    let loss = align_loss_var(
        tape.constant(v.clone()),
        tape.constant(p.clone()),
        viseme_frames,
        phoneme_frames,
        inv,
        cfg,
    )?;
    Ok(loss.item())
}

/// Differentiable alignment loss. The class sequences are plain data, so
/// no gradient flows through the mapping matrix.
pub fn align_loss_var<'t>(
    v: Var<'t>,
    p: Var<'t>,
    viseme_frames: &[Vec<usize>],
    phoneme_frames: &[Vec<usize>],
    inv: &LinguisticInventory,
    cfg: &LossConfig,
) -> Result<Var<'t>, LossError> {
    cfg.validate()?;
    let shape = v.shape();
    if shape != p.shape() || shape.len() != 3 {
        return Err(LossError::Shape(format!(
            "align loss needs equal [B, T, C] features, got {shape:?} and {:?}",
            p.shape()
        )));
    }
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    if viseme_frames.len() != b || phoneme_frames.len() != b {
        return Err(LossError::LengthMismatch {
            what: "align batch",
            left: b,
            right: viseme_frames.len().min(phoneme_frames.len()),
        });
    }
    let tape = v.tape();
    let mut per_sample = Vec::with_capacity(b);
    for bi in 0..b {
        let len = viseme_frames[bi].len();
        if phoneme_frames[bi].len() != len {
            return Err(LossError::LengthMismatch {
                what: "align class sequences",
                left: len,
                right: phoneme_frames[bi].len(),
            });
        }
        if len > t {
            return Err(LossError::Shape(format!("class sequence length {len} exceeds T {t}")));
        }
        let mapping = build_mapping_matrix(&viseme_frames[bi], &phoneme_frames[bi], inv)?;
        let window = build_window_mask(len, cfg.window_w);
        let positives = positive_mask(&mapping, &window)?;
        let (target, active) = positive_distribution(&positives);
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active == 0 || len == 0 {
            continue;
        }
        let vb = v.slice(0, bi, 1)?.reshape(&[t, c])?.slice(0, 0, len)?;
        let pb = p.slice(0, bi, 1)?.reshape(&[t, c])?.slice(0, 0, len)?;
        let outside: Vec<bool> = window.as_slice().iter().map(|&w| !w).collect();
        let log_q = similarity_var(vb, pb)?
            .scale(1.0 / cfg.tau)?
            .masked_fill(&outside, MASK_FILL)?
            .log_softmax()?;
        let entropy_term: f64 = target
            .data()
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| x * x.ln())
            .sum();
        let cross = log_q.mul(tape.constant(target))?.sum()?;
        // sum_i KL_i = sum p log p - sum p log q
        let kl_sum = cross.scale(-1.0)?.add_scalar(entropy_term)?;
        per_sample.push(kl_sum.scale(1.0 / (n_active as f64 + cfg.epsilon))?);
    }
    let total = match per_sample.split_first() {
        None => tape.constant(Array::scalar(0.0)),
        Some((first, rest)) => {
            let mut acc = *first;
            for x in rest {
                acc = acc.add(*x)?;
            }
            acc
        }
    };
    Ok(total.scale(1.0 / b.max(1) as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(w: usize, tau: f64) -> LossConfig {
        LossConfig {
            window_w: w,
            tau,
            ..LossConfig::default()
        }
    }

    #[test]
    fn similarity_examples() {
        let v = Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let s = similarity_matrix(&v, &v).unwrap();
        assert!((s.at(&[0, 0]) - 1.0).abs() < 1e-15);
        assert!((s.at(&[1, 1]) - 1.0).abs() < 1e-15);
        assert_eq!(s.at(&[0, 1]), 0.0);
        let p = Array::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let s = similarity_matrix(&v, &p).unwrap();
        assert!((s.at(&[0, 0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(similarity_matrix(&v, &Array::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn positive_mask_examples() {
        let m = BinaryMatrix::from_rows(&[&[1, 0, 1], &[0, 1, 1], &[1, 1, 0]]);
        assert_eq!(positive_mask(&m, &build_window_mask(3, 5)).unwrap(), m);
        let ones = BinaryMatrix::from_fn(4, |_, _| true);
        assert_eq!(
            positive_mask(&ones, &build_window_mask(4, 1)).unwrap(),
            BinaryMatrix::from_fn(4, |i, j| i == j)
        );
        let diag = BinaryMatrix::from_rows(&[&[1, 0], &[0, 1]]);
        assert_eq!(positive_mask(&diag, &build_window_mask(2, 5)).unwrap(), diag);
    }

    #[test]
    fn local_distribution_examples() {
        let w = build_window_mask(5, 3);
        let q = local_distribution(&Array::full(&[5, 5], 0.4), &w, 0.1).unwrap();
        for j in 1..4 {
            assert!((q.at(&[2, j]) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(q.at(&[2, 0]), 0.0);
        let mut s = Array::full(&[3, 3], 0.2);
        s.set(&[1, 2], 0.5);
        let q = local_distribution(&s, &build_window_mask(3, 3), 1e-3).unwrap();
        assert!((q.at(&[1, 2]) - 1.0).abs() < 1e-6);
        assert!(local_distribution(&s, &w, 0.0).is_err());
    }

    #[test]
    fn positive_distribution_examples() {
        let m = BinaryMatrix::from_rows(&[&[1, 1, 0], &[0, 0, 0], &[0, 0, 1]]);
        let (p, active) = positive_distribution(&m);
        assert_eq!(p.row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(p.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(active, vec![true, false, true]);
        let (p, _) = positive_distribution(&BinaryMatrix::from_fn(3, |i, j| i == j));
        assert_eq!(p, Array::identity(3));
    }

    #[test]
    fn all_blank_predictions_give_zero() {
        let inv = LinguisticInventory::bundled();
        let v = Array::full(&[2, 4, 3], 0.3);
        let p = Array::full(&[2, 4, 3], -0.2);
        let blanks = vec![vec![0; 4], vec![0; 4]];
        let l = align_loss(&v, &p, &blanks, &blanks, &inv, &cfg(5, 0.1)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn matching_distributions_give_zero() {
        // w = 1: each window holds one frame, so q(i|i) = 1 = p(i|i)
        let inv = LinguisticInventory::bundled();
        let f = inv.phoneme_index("f").unwrap();
        let v = Array::new(&[1, 3, 2], vec![1.0, 0.2, -0.3, 0.4, 0.9, 0.9]).unwrap();
        let p = Array::new(&[1, 3, 2], vec![0.1, 1.0, 0.5, 0.5, -1.0, 0.3]).unwrap();
        let l = align_loss(&v, &p, &[vec![3, 3, 3]], &[vec![f, f, f]], &inv, &cfg(1, 0.1)).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn mismatched_shapes_are_errors() {
        let inv = LinguisticInventory::bundled();
        let v = Array::zeros(&[1, 3, 2]);
        let p = Array::zeros(&[1, 3, 3]);
        let c = vec![vec![0; 3]];
        assert!(align_loss(&v, &p, &c, &c, &inv, &cfg(5, 0.1)).is_err());
        assert!(align_loss(&v, &v, &c, &[vec![0; 2]], &inv, &cfg(5, 0.1)).is_err());
        assert!(align_loss(&v, &v, &c, &c, &inv, &cfg(4, 0.1)).is_err());
    }
}
