use crate::linguistics::{Lexicon, LinguisticInventory};

/// Expected viseme share over phoneme tokens when characters are drawn
/// independently with probabilities proportional to `weights`.
pub fn token_viseme_distribution(lexicon: &Lexicon, inv: &LinguisticInventory, weights: &[f64]) -> Vec<f64> {
    let mut mass = vec![0.0; inv.num_visemes()];
    for (entry, &w) in lexicon.entries().iter().zip(weights) {
        for &p in &entry.phonemes {
            mass[inv.viseme_of(p)] += w;
        }
    }
    let total: f64 = mass.iter().sum();
    mass.iter().map(|m| m / total).collect()
}

/// Character weights whose token-level viseme distribution approaches
/// `target`.
///
/// Each character contributes its own viseme histogram, so the token
/// distribution is a mixture over characters weighted by their share of
/// phoneme tokens. The shares are fitted by EM (maximum likelihood of
/// `target` under the mixture) and converted back to per-draw weights by
/// dividing out each character's length.
pub fn fit_character_weights(lexicon: &Lexicon, inv: &LinguisticInventory, target: &[f64], iterations: usize) -> Vec<f64> {
    let n = lexicon.len();
    let k = inv.num_visemes();
    let hist: Vec<Vec<f64>> = lexicon
        .entries()
        .iter()
        .map(|e| {
            let mut h = vec![0.0; k];
            for &p in &e.phonemes {
                h[inv.viseme_of(p)] += 1.0 / e.phonemes.len() as f64;
            }
            h
        })
        .collect();
    let mut share = vec![1.0 / n as f64; n];
    let mut mixture = vec![0.0; k];
    for _ in 0..iterations {
        mixture.iter_mut().for_each(|m| *m = 0.0);
        for (s, h) in share.iter().zip(&hist) {
            for v in 0..k {
                mixture[v] += s * h[v];
            }
        }
        for (s, h) in share.iter_mut().zip(&hist) {
            let resp: f64 = (0..k)
                .filter(|&v| mixture[v] > 0.0)
                .map(|v| target[v] * h[v] / mixture[v])
                .sum();
            *s *= resp;
        }
        let z: f64 = share.iter().sum();
        share.iter_mut().for_each(|s| *s /= z);
    }
    let weights: Vec<f64> = share
        .iter()
        .zip(lexicon.entries())
        .map(|(s, e)| s / e.phonemes.len() as f64)
        .collect();
    let z: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / z).collect()
}
