//! CTC greedy and prefix-beam decoding, autoregressive greedy decoding,
//! and character error rate.

mod cer;
mod report;

pub use cer::{cer, CerError, CerReport};
pub use report::{read_report, summarize, write_report, CorpusSummary, ReportLine, UtteranceRecord};

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::kernels::{log_add, log_softmax_into};
use crate::diffcore::Array;
use crate::model::ActivationConfig;

pub const BLANK: usize = 0;

/// Framewise argmax classes of the active branches.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchFrames {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phoneme: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub viseme: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Log-probability of `tokens` under the decoder that produced it.
    pub score: f64,
    pub branch_frames: Option<BranchFrames>,
    pub activation: Option<ActivationConfig>,
}

impl Hypothesis {
    pub fn new(tokens: Vec<usize>, score: f64) -> Self {
        Self {
            tokens,
            score,
            branch_frames: None,
            activation: None,
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Framewise argmax of a `[T, K]` array.
pub fn frame_argmax(logits: &Array) -> Vec<usize> {
    let k = logits.last_dim();
    if k == 0 {
        return Vec::new();
    }
    logits.data().chunks(k).map(argmax).collect()
}

/// Merge repeats, then drop blanks.
pub fn ctc_collapse(frames: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in frames {
        if Some(c) != prev && c != BLANK {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

pub fn ctc_greedy_decode(logits: &Array) -> Vec<usize> {
    ctc_collapse(&frame_argmax(logits))
}

/// Prefix beam search over `[T, K]` logits. Returns up to `beam_width`
/// label sequences, best first, each scored by its total log-probability
/// over the paths that survived pruning. `usize::MAX` disables pruning,
/// which makes the scores exact marginals.
pub fn ctc_beam_decode(logits: &Array, beam_width: usize) -> Vec<Hypothesis> {
    let beam_width = beam_width.max(1);
    let k = logits.last_dim();
    let neg = f64::NEG_INFINITY;
    // prefix -> (log p ending in blank, log p ending in non-blank)
    let mut beam: Vec<(Vec<usize>, f64, f64)> = vec![(Vec::new(), 0.0, neg)];
    let mut logp = vec![0.0; k];
    for frame in logits.data().chunks(k.max(1)) {
        log_softmax_into(frame, &mut logp);
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, pb, pnb) in &beam {
            let total = log_add(*pb, *pnb);
            for (c, &lp) in logp.iter().enumerate() {
                if c == BLANK {
                    let e = next.entry(prefix.clone()).or_insert((neg, neg));
                    e.0 = log_add(e.0, total + lp);
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(c);
                if prefix.last() == Some(&c) {
                    let e = next.entry(prefix.clone()).or_insert((neg, neg));
                    e.1 = log_add(e.1, pnb + lp);
                    let e = next.entry(extended).or_insert((neg, neg));
                    e.1 = log_add(e.1, pb + lp);
                } else {
                    let e = next.entry(extended).or_insert((neg, neg));
                    e.1 = log_add(e.1, total + lp);
                }
            }
        }
        beam = next
            .into_iter()
            .filter(|(_, (b, nb))| log_add(*b, *nb) > neg)
            .map(|(p, (b, nb))| (p, b, nb))
            .collect();
        beam.sort_by(|a, b| rank(&b.0, log_add(b.1, b.2), &a.0, log_add(a.1, a.2)));
        beam.truncate(beam_width);
    }
    beam.into_iter()
        .map(|(p, b, nb)| Hypothesis::new(p, log_add(b, nb)))
        .collect()
}

// Higher score first; equal scores fall back to ascending token order.
fn rank(b: &[usize], sb: f64, a: &[usize], sa: f64) -> Ordering {
    sb.total_cmp(&sa).then_with(|| a.cmp(b))
}

/// One step of an autoregressive decoder: logits for the token that
/// follows `prefix` (which excludes the start symbol).
pub trait StepDecoder {
    type Error;
    fn end_token(&self) -> usize;
    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>, Self::Error>;
}

/// Argmax decoding until the end token or `max_len` tokens.
pub fn attention_greedy_decode<D: StepDecoder>(decoder: &D, max_len: usize) -> Result<Hypothesis, D::Error> {
    let eos = decoder.end_token();
    let mut tokens = Vec::new();
    let mut score = 0.0;
    while tokens.len() < max_len {
        let logits = decoder.next_logits(&tokens)?;
        let mut lp = vec![0.0; logits.len()];
        log_softmax_into(&logits, &mut lp);
        let best = argmax(&lp);
        score += lp[best];
        if best == eos {
            break;
        }
        tokens.push(best);
    }
    Ok(Hypothesis::new(tokens, score))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_frames(frames: &[usize], k: usize) -> Array {
        let mut a = Array::zeros(&[frames.len(), k]);
        for (t, &c) in frames.iter().enumerate() {
            a.set(&[t, c], 5.0);
        }
        a
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(ctc_greedy_decode(&one_hot_frames(&[0, 1, 1, 0, 2], 3)), vec![1, 2]);
        assert_eq!(ctc_greedy_decode(&one_hot_frames(&[0, 0, 0], 3)), Vec::<usize>::new());
        assert_eq!(ctc_greedy_decode(&one_hot_frames(&[1, 0, 1], 3)), vec![1, 1]);
    }

    #[test]
    fn beam_scores_are_sorted_and_ties_ascending() {
        let logits = Array::new(&[3, 3], vec![0.1, 0.5, -0.2, 0.3, 0.3, 0.0, 1.0, -1.0, 0.2]).unwrap();
        let hyps = ctc_beam_decode(&logits, 4);
        assert_eq!(hyps.len(), 4);
        assert!(hyps.windows(2).all(|w| w[0].score >= w[1].score));
        // uniform frames: [1] and [2] have equal mass, [1] comes first
        let hyps = ctc_beam_decode(&Array::zeros(&[1, 3]), usize::MAX);
        assert_eq!(hyps[0].tokens, Vec::<usize>::new());
        assert_eq!(hyps[1].tokens, vec![1]);
        assert_eq!(hyps[2].tokens, vec![2]);
    }

    #[test]
    fn full_beam_is_a_distribution() {
        let logits = Array::new(&[3, 2], vec![0.4, -0.3, 1.2, 0.0, -0.5, 0.9]).unwrap();
        let hyps = ctc_beam_decode(&logits, usize::MAX);
        let mass: f64 = hyps.iter().map(|h| h.score.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    struct Rigged {
        eos: usize,
        script: Vec<usize>,
    }

    impl StepDecoder for Rigged {
        type Error = ();
        fn end_token(&self) -> usize {
            self.eos
        }
        fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>, ()> {
            let mut l = vec![0.0; 4];
            l[*self.script.get(prefix.len()).unwrap_or(&1)] = 3.0;
            Ok(l)
        }
    }

    #[test]
    fn attention_greedy_examples() {
        let d = Rigged { eos: 3, script: vec![3] };
        assert!(attention_greedy_decode(&d, 5).unwrap().tokens.is_empty());
        let d = Rigged { eos: 3, script: vec![] };
        assert_eq!(attention_greedy_decode(&d, 5).unwrap().tokens, vec![1; 5]);
        let d = Rigged { eos: 3, script: vec![2, 1, 3] };
        let a = attention_greedy_decode(&d, 5).unwrap();
        assert_eq!(a.tokens, vec![2, 1]);
        assert_eq!(a, attention_greedy_decode(&d, 5).unwrap());
    }
}
