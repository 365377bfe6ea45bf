//! The fixed synthetic benchmark behind the ablation and activation
//! comparisons: a few seeds, three training variants, one held-out set.

use serde::{Deserialize, Serialize};

use crate::data_synth::{generate_corpus, SynthConfig};
use crate::linguistics::{LinguisticInventory, Lexicon};
use crate::model::{ActivationConfig, DecodeMethod};

use super::{evaluate, train, TrainConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    DisableAlign,
    DisableBranches,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::DisableAlign, Variant::DisableBranches];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DisableAlign => "disable_align",
            Variant::DisableBranches => "disable_branches",
        }
    }

    fn apply(self, cfg: &mut TrainConfig) {
        cfg.disable_align = self == Variant::DisableAlign;
        cfg.disable_branches = self == Variant::DisableBranches;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Training corpus settings; `seed` is replaced per run.
    pub synth: SynthConfig,
    pub test_utterances: usize,
    /// Added to the run seed to draw the held-out set.
    pub test_seed_offset: u64,
    pub train: TrainConfig,
    /// Every activation config is also scored for full-model runs.
    pub all_activations: bool,
    pub timing_repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationResult {
    pub activation: ActivationConfig,
    pub cer: f64,
    pub active_params: usize,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub variant: Variant,
    pub seed: u64,
    /// CER with every branch the variant trained.
    pub test_cer: f64,
    pub final_train_cer: Option<f64>,
    pub activations: Vec<ActivationResult>,
}

/// Desk-sized defaults: small enough that 5 seeds times 3 variants finish
/// in minutes on one core.
pub fn standard_benchmark() -> BenchmarkConfig {
    let synth = SynthConfig {
        num_utterances: 160,
        char_vocab_size: 12,
        noise_std: 0.7,
        ..SynthConfig::default()
    };
    let mut train = TrainConfig {
        epochs_phase1: 8,
        epochs_phase2: 30,
        lr_phase1: 3e-3,
        lr_phase2: 3e-3,
        cer_sample: 0,
        time_mask_prob: 0.0,
        ..TrainConfig::default()
    };
    train.model.feature_dim = 32;
    train.model.ffn_dim = 64;
    train.model.attention_heads = 2;
    train.model.trunk_layers = 1;
    train.model.char_encoder_layers = 1;
    // tuned on seeds 11-15, which the benchmark itself does not use
    train.loss.lambda1 = 3.0;
    BenchmarkConfig {
        seeds: vec![21, 22, 23, 24, 25],
        variants: Variant::ALL.to_vec(),
        synth,
        test_utterances: 128,
        test_seed_offset: 1000,
        train,
        all_activations: true,
        timing_repeats: 1,
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains and scores one run per (seed, variant), calling `progress`
/// after each.
pub fn run_benchmark<F>(cfg: &BenchmarkConfig, inv: &LinguisticInventory, lexicon: &Lexicon, mut progress: F) -> Result<Vec<BenchmarkRun>, TrainError>
where
    F: FnMut(&BenchmarkRun),
{
    let lexicon = lexicon.truncated(cfg.synth.char_vocab_size);
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let train_set = generate_corpus(&SynthConfig { seed, ..cfg.synth.clone() }, inv, &lexicon)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let test_set = generate_corpus(
            &SynthConfig {
                seed: seed + cfg.test_seed_offset,
                num_utterances: cfg.test_utterances,
                ..cfg.synth.clone()
            },
            inv,
            &lexicon,
        )
        .map_err(|e| TrainError::Config(e.to_string()))?;
        for &variant in &cfg.variants {
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            tc.model.num_chars = lexicon.len();
            tc.model.input_dim = cfg.synth.feature_dim;
            variant.apply(&mut tc);
            let state = train(tc, &train_set, inv)?;
            let full = state.model.full_activation();
            let acts: Vec<ActivationConfig> = if variant == Variant::Full && cfg.all_activations {
                ActivationConfig::ALL.to_vec()
            } else {
                vec![full]
            };
            let out = evaluate(&state.model, &test_set, &lexicon, &acts, DecodeMethod::CtcGreedy, cfg.timing_repeats)?;
            let activations: Vec<ActivationResult> = out
                .summaries
                .iter()
                .zip(&out.latency)
                .map(|(s, &(_, secs))| ActivationResult {
                    activation: s.activation,
                    cer: s.cer,
                    active_params: s.active_params,
                    wall_clock_secs: secs,
                })
                .collect();
            let test_cer = activations
                .iter()
                .find(|a| a.activation == full)
                .map_or(f64::NAN, |a| a.cer);
            let final_train_cer = state.log.iter().rev().find_map(|l| match l {
                super::LogLine::Epoch(e) => e.train_cer,
                _ => None,
            });
            let run = BenchmarkRun {
                variant,
                seed,
                test_cer,
                final_train_cer,
                activations,
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}
