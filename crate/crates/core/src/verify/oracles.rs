//! Slow reference implementations written straight from the definitions.
//! They share no code with the production losses and metrics.

use std::collections::{BTreeMap, BTreeSet};

use crate::diffcore::Array;
use crate::linguistics::LinguisticInventory;

fn softmax_rows(logits: &Array) -> Vec<Vec<f64>> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != 0 {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Calls `f(path, probability)` for all `K^T` framewise paths.
fn for_each_path(probs: &[Vec<f64>], mut f: impl FnMut(&[usize], f64)) {
    let t = probs.len();
    if t == 0 {
        return;
    }
    let k = probs[0].len();
    let mut path = vec![0usize; t];
    loop {
        let p: f64 = path.iter().enumerate().map(|(ti, &c)| probs[ti][c]).product();
        f(&path, p);
        let mut pos = t;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < k {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// `P(target | logits)` by summing every path that collapses to it.
/// Blank is class 0.
pub fn ctc_probability(logits: &Array, target: &[usize]) -> f64 {
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    for_each_path(&probs, |path, p| {
        if collapse(path) == target {
            total += p;
        }
    });
    total
}

/// Probability of every label sequence reachable from `T x K` logits.
pub fn labeling_distribution(logits: &Array) -> BTreeMap<Vec<usize>, f64> {
    let probs = softmax_rows(logits);
    let mut out = BTreeMap::new();
    for_each_path(&probs, |path, p| {
        *out.entry(collapse(path)).or_insert(0.0) += p;
    });
    out
}

/// The most probable label sequence and its probability.
pub fn best_labeling(logits: &Array) -> (Vec<usize>, f64) {
    labeling_distribution(logits)
        .into_iter()
        .fold((Vec::new(), f64::NEG_INFINITY), |best, (l, p)| if p > best.1 { (l, p) } else { best })
}

/// One sequence for the dense alignment oracle: unpadded `[T, C]` rows
/// and the framewise classes on each side.
pub struct AlignSample<'a> {
    pub v: &'a [Vec<f64>],
    pub p: &'a [Vec<f64>],
    pub viseme_classes: &'a [usize],
    pub phoneme_classes: &'a [usize],
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

/// Alignment loss computed by materializing every matrix and
/// distribution. Compatible (viseme, phoneme) pairs come from the
/// inventory's viseme rows rather than a per-phoneme lookup.
pub fn dense_align_loss(samples: &[AlignSample<'_>], inv: &LinguisticInventory, w: usize, tau: f64, eps: f64) -> f64 {
    let mut compatible = BTreeSet::new();
    for vis in 1..inv.num_visemes() {
        for &ph in inv.viseme_members(vis) {
            compatible.insert((vis, ph));
        }
    }
    let r = (w / 2) as i64;
    let mut total = 0.0;
    for s in samples {
        let n = s.viseme_classes.len();
        let mut kl_sum = 0.0;
        let mut rows = 0usize;
        for i in 0..n {
            let window: Vec<usize> = (0..n).filter(|&j| (i as i64 - j as i64).abs() <= r).collect();
            let pos: Vec<usize> = window
                .iter()
                .copied()
                .filter(|&j| compatible.contains(&(s.viseme_classes[i], s.phoneme_classes[j])))
                .collect();
            if pos.is_empty() {
                continue;
            }
            rows += 1;
            let logits: Vec<f64> = window.iter().map(|&j| cosine(&s.v[i], &s.p[j]) / tau).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
            let target = 1.0 / pos.len() as f64;
            for (idx, &j) in window.iter().enumerate() {
                if pos.contains(&j) {
                    let log_q = logits[idx] - m - z.ln();
                    kl_sum += target * (target.ln() - log_q);
                }
            }
        }
        if rows > 0 {
            total += kl_sum / (rows as f64 + eps);
        }
    }
    total / samples.len().max(1) as f64
}

/// Plain Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}
