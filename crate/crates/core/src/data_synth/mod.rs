//! Synthetic corpora: characters drawn from the lexicon, expanded to
//! phonemes with sampled durations, rendered as noisy codebook frames.
//!
//! Each phoneme's codebook row is its viseme's row plus a smaller
//! phoneme-specific offset, so phonemes that share a viseme also look
//! alike in feature space.

mod manifest;
mod prior;

pub use manifest::{read_manifest, write_manifest, ManifestError, MANIFEST_VERSION};
pub use prior::{fit_character_weights, token_viseme_distribution};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Array;
use crate::linguistics::{LabelTriple, Lexicon, LinguisticInventory, BLANK};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("lexicon has {available} characters, config needs {needed}")]
    InsufficientLexicon { needed: usize, available: usize },
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// Seeds the codebook separately so corpora drawn with different
    /// `seed`s share one feature space.
    pub codebook_seed: u64,
    pub num_utterances: usize,
    /// Uses the first `char_vocab_size` lexicon entries.
    pub char_vocab_size: usize,
    pub sentence_len_min: usize,
    pub sentence_len_max: usize,
    pub frames_per_phoneme_min: usize,
    pub frames_per_phoneme_max: usize,
    /// Silence frames before and after the speech, each drawn from
    /// `0..=silence_max`.
    pub silence_max: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    /// Scale of the phoneme offset relative to its viseme row.
    pub within_viseme_scale: f64,
    /// Draw characters so phoneme tokens follow the viseme prior.
    pub viseme_prior: bool,
    pub time_mask_prob: f64,
    pub time_mask_max_width: usize,
    /// Std of an extra codebook perturbation (0 disables it).
    pub codebook_perturbation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            codebook_seed: 1234,
            num_utterances: 64,
            char_vocab_size: 24,
            sentence_len_min: 2,
            sentence_len_max: 4,
            frames_per_phoneme_min: 3,
            frames_per_phoneme_max: 7,
            silence_max: 2,
            feature_dim: 16,
            noise_std: 0.5,
            within_viseme_scale: 0.5,
            viseme_prior: false,
            time_mask_prob: 0.0,
            time_mask_max_width: 4,
            codebook_perturbation: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.sentence_len_min == 0 || self.sentence_len_min > self.sentence_len_max {
            return bad("sentence length range must be nonempty and start at 1 or more");
        }
        if self.frames_per_phoneme_min == 0 || self.frames_per_phoneme_min > self.frames_per_phoneme_max {
            return bad("frames per phoneme range must be nonempty and start at 1 or more");
        }
        if self.feature_dim == 0 || self.char_vocab_size == 0 {
            return bad("feature_dim and char_vocab_size must be positive");
        }
        if !(self.noise_std >= 0.0) || !(self.codebook_perturbation >= 0.0) || !(self.within_viseme_scale >= 0.0) {
            return bad("noise scales must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.time_mask_prob) {
            return bad("time_mask_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Fixed per-phoneme feature prototypes, `[K_p, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    rows: Array,
}

impl Codebook {
    pub fn generate(cfg: &SynthConfig, inv: &LinguisticInventory) -> Self {
        let c = cfg.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.codebook_seed);
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let viseme_rows = normal(inv.num_visemes() * c);
        let phoneme_rows = normal(inv.num_phonemes() * c);
        let perturb = normal(inv.num_phonemes() * c);
        let mut rows = Array::zeros(&[inv.num_phonemes(), c]);
        for p in 0..inv.num_phonemes() {
            let v = inv.viseme_of(p);
            for d in 0..c {
                let value = viseme_rows[v * c + d]
                    + cfg.within_viseme_scale * phoneme_rows[p * c + d]
                    + cfg.codebook_perturbation * perturb[p * c + d];
                rows.set(&[p, d], value);
            }
        }
        Self { rows }
    }

    pub fn rows(&self) -> &Array {
        &self.rows
    }

    pub fn row(&self, phoneme: usize) -> &[f64] {
        self.rows.row(phoneme)
    }

    /// Nearest row (squared Euclidean) for every frame of `[T, C]` features.
    pub fn classify(&self, features: &Array) -> Vec<usize> {
        let c = self.rows.last_dim();
        features
            .data()
            .chunks(c)
            .map(|f| {
                let mut best = (f64::INFINITY, 0);
                for p in 0..self.rows.rows() {
                    let d: f64 = self.row(p).iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, p);
                    }
                }
                best.1
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T, C]`.
    pub features: Array,
    pub labels: LabelTriple,
    /// Frames per phoneme, aligned with `labels.phonemes`.
    pub durations: Vec<usize>,
    pub lead_silence: usize,
    pub trail_silence: usize,
    pub frame_phonemes: Vec<usize>,
    pub frame_visemes: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.frame_phonemes.len()
    }
}

/// Silence, each phoneme repeated for its duration, silence.
pub fn expand_frames(phonemes: &[usize], durations: &[usize], lead: usize, trail: usize) -> Vec<usize> {
    let mut frames = vec![BLANK; lead];
    for (&p, &d) in phonemes.iter().zip(durations) {
        frames.extend(std::iter::repeat_n(p, d));
    }
    frames.extend(std::iter::repeat_n(BLANK, trail));
    frames
}

pub fn generate_corpus(
    cfg: &SynthConfig,
    inv: &LinguisticInventory,
    lexicon: &Lexicon,
) -> Result<Vec<Utterance>, SynthError> {
    cfg.validate()?;
    if lexicon.len() < cfg.char_vocab_size {
        return Err(SynthError::InsufficientLexicon {
            needed: cfg.char_vocab_size,
            available: lexicon.len(),
        });
    }
    let lexicon = lexicon.truncated(cfg.char_vocab_size);
    let weights = if cfg.viseme_prior {
        fit_character_weights(&lexicon, inv, inv.viseme_frequency(), 2000)
    } else {
        vec![1.0; lexicon.len()]
    };
    let picker = WeightedIndex::new(&weights).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let codebook = Codebook::generate(cfg, inv);
    let c = cfg.feature_dim;

    let mut out = Vec::with_capacity(cfg.num_utterances);
    for idx in 0..cfg.num_utterances {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(idx as u64);
        let n_chars = rng.random_range(cfg.sentence_len_min..=cfg.sentence_len_max);
        let chars: Vec<usize> = (0..n_chars).map(|_| picker.sample(&mut rng)).collect();
        let labels = LabelTriple::from_chars(&chars, &lexicon, inv);
        let durations: Vec<usize> = labels
            .phonemes
            .iter()
            .map(|_| rng.random_range(cfg.frames_per_phoneme_min..=cfg.frames_per_phoneme_max))
            .collect();
        let lead = rng.random_range(0..=cfg.silence_max);
        let trail = rng.random_range(0..=cfg.silence_max);
        let frame_phonemes = expand_frames(&labels.phonemes, &durations, lead, trail);
        let frame_visemes = inv.visemes_for(&frame_phonemes);
        let t = frame_phonemes.len();
        let mut data = Vec::with_capacity(t * c);
        for &p in &frame_phonemes {
            for &mu in codebook.row(p) {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + cfg.noise_std * z);
            }
        }
        let mut features = Array::new(&[t, c], data).expect("sized above");
        time_mask(&mut features, &mut rng, cfg.time_mask_prob, cfg.time_mask_max_width);
        out.push(Utterance {
            id: format!("utt{idx:05}"),
            features,
            labels,
            durations,
            lead_silence: lead,
            trail_silence: trail,
            frame_phonemes,
            frame_visemes,
        });
    }
    Ok(out)
}

/// With probability `prob`, zeroes one span of `1..=max_width` frames of
/// `[T, C]` features. Returns the span as `(start, width)`. The width is
/// capped at `T - 1` so some frames always survive.
pub fn time_mask<R: Rng + ?Sized>(features: &mut Array, rng: &mut R, prob: f64, max_width: usize) -> Option<(usize, usize)> {
    let t = features.rows();
    let cap = max_width.min(t.saturating_sub(1));
    if prob <= 0.0 || cap == 0 || !rng.random_bool(prob.min(1.0)) {
        return None;
    }
    let width = rng.random_range(1..=cap);
    let start = rng.random_range(0..=t - width);
    let c = features.last_dim();
    features.data_mut()[start * c..(start + width) * c].fill(0.0);
    Some((start, width))
}

/// Utterances with at most `max_frames` frames, in corpus order.
pub fn filter_by_length(corpus: &[Utterance], max_frames: usize) -> Vec<Utterance> {
    corpus.iter().filter(|u| u.frames() <= max_frames).cloned().collect()
}

/// Viseme share over phoneme tokens (index 0 stays zero).
pub fn empirical_viseme_frequency(corpus: &[Utterance], inv: &LinguisticInventory) -> Vec<f64> {
    let mut counts = vec![0usize; inv.num_visemes()];
    for u in corpus {
        for &v in &u.labels.visemes {
            counts[v] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts.iter().map(|&n| n as f64 / total.max(1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (LinguisticInventory, Lexicon) {
        let inv = LinguisticInventory::bundled();
        let lex = Lexicon::bundled(&inv);
        (inv, lex)
    }

    #[test]
    fn noiseless_frames_are_codebook_rows() {
        let (inv, lex) = setup();
        let cfg = SynthConfig {
            noise_std: 0.0,
            frames_per_phoneme_min: 1,
            frames_per_phoneme_max: 1,
            num_utterances: 10,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&cfg, &inv, &lex).unwrap();
        let book = Codebook::generate(&cfg, &inv);
        for u in &corpus {
            assert_eq!(book.classify(&u.features), u.frame_phonemes);
            assert_eq!(u.features.row(u.lead_silence), book.row(u.labels.phonemes[0]));
        }
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let (inv, lex) = setup();
        let cfg = SynthConfig::default();
        let a = generate_corpus(&cfg, &inv, &lex).unwrap();
        assert_eq!(a, generate_corpus(&cfg, &inv, &lex).unwrap());
        for u in &a {
            assert_eq!(inv.visemes_for(&u.frame_phonemes), u.frame_visemes);
            assert_eq!(
                expand_frames(&u.labels.phonemes, &u.durations, u.lead_silence, u.trail_silence),
                u.frame_phonemes
            );
            assert_eq!(u.frames(), u.durations.iter().sum::<usize>() + u.lead_silence + u.trail_silence);
            assert_eq!(u.features.shape(), &[u.frames(), cfg.feature_dim]);
        }
        let other = generate_corpus(&SynthConfig { seed: 1, ..cfg }, &inv, &lex).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn lexicon_coverage_is_checked() {
        let (inv, lex) = setup();
        let cfg = SynthConfig {
            char_vocab_size: lex.len() + 1,
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_corpus(&cfg, &inv, &lex),
            Err(SynthError::InsufficientLexicon { .. })
        ));
    }

    #[test]
    fn time_mask_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let orig = Array::new(&[10, 2], (1..=20).map(f64::from).collect()).unwrap();
        let mut x = orig.clone();
        assert_eq!(time_mask(&mut x, &mut rng, 0.0, 2), None);
        assert_eq!(x, orig);
        for _ in 0..50 {
            let mut x = orig.clone();
            let (start, width) = time_mask(&mut x, &mut rng, 1.0, 2).unwrap();
            assert!((1..=2).contains(&width));
            for t in 0..10 {
                let zeroed = x.row(t).iter().all(|&v| v == 0.0);
                assert_eq!(zeroed, (start..start + width).contains(&t));
                if !zeroed {
                    assert_eq!(x.row(t), orig.row(t));
                }
            }
        }
    }

    #[test]
    fn curriculum_filter() {
        let (inv, lex) = setup();
        let corpus = generate_corpus(&SynthConfig::default(), &inv, &lex).unwrap();
        let short = filter_by_length(&corpus, 24);
        assert!(short.iter().all(|u| u.frames() <= 24));
        assert_eq!(short.len(), corpus.iter().filter(|u| u.frames() <= 24).count());
    }
}
