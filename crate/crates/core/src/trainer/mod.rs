//! Two-phase curriculum training with AdamW, warmup+cosine schedules,
//! gradient clipping, per-step loss logging and resumable checkpoints.

mod benchmark;
mod eval;
mod objective;
mod optim;

pub use benchmark::{median, run_benchmark, standard_benchmark, ActivationResult, BenchmarkConfig, BenchmarkRun, Variant};
pub use eval::{evaluate, EvalOutput};
pub use objective::{compute_loss, LossOutput};
pub use optim::{clip_global_norm, lr_schedule, AdamW, AdamWConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_synth::{filter_by_length, time_mask, Utterance};
use crate::decode_metrics::cer;
use crate::diffcore::Tape;
use crate::linguistics::LinguisticInventory;
use crate::losses::{LossConfig, LossError};
use crate::model::{Batch, Bound, Checkpoint, DropMasks, Model, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("step {step}: {component} loss failed: {source}")]
    Component {
        step: usize,
        component: &'static str,
        source: LossError,
    },
    #[error("step {step}: non-finite {component} loss ({value})")]
    NonFinite {
        step: usize,
        component: &'static str,
        value: f64,
    },
    #[error("step {step}: logged total {logged} differs from recombination {recombined}")]
    Inconsistent { step: usize, logged: f64, recombined: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    /// Phase 1 trains only on utterances with at most this many frames.
    pub phase1_max_frames: usize,
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Time masking applied in phase 2.
    pub time_mask_prob: f64,
    pub time_mask_max_width: usize,
    /// Stop after this many optimizer steps (0 means no cap).
    pub max_steps: usize,
    /// Utterances decoded for the per-epoch training CER (0 disables it).
    pub cer_sample: usize,
    pub disable_align: bool,
    pub disable_branches: bool,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs_phase1: 5,
            epochs_phase2: 5,
            phase1_max_frames: 24,
            batch_size: 8,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            warmup_steps: 10,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            time_mask_prob: 0.5,
            time_mask_max_width: 4,
            max_steps: 0,
            cer_sample: 32,
            disable_align: false,
            disable_branches: false,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.phase1_max_frames == 0 {
            return bad("phase1_max_frames must be positive");
        }
        if !(self.lr_phase1 > 0.0) || !(self.lr_phase2 > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("grad_clip must be positive and weight_decay nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        self.loss.validate()?;
        self.effective_model().validate()?;
        Ok(())
    }

    /// The model config with the branch switch applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.disable_branches {
            m.with_branches = false;
        }
        m
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: usize,
    pub epoch: usize,
    pub lr: f64,
    pub char_ctc: f64,
    pub char_attn: f64,
    pub char_hybrid: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phoneme_ctc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viseme_ctc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    pub epoch: usize,
    pub step: usize,
    pub utterances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_cer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogLine {
    Step(StepRecord),
    Epoch(EpochRecord),
}

impl LogLine {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log lines serialize")
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub step: usize,
    /// 1 or 2; 3 once training is finished.
    pub phase: usize,
    /// Epochs completed in the current phase.
    pub epoch: usize,
    /// Steps taken in the current phase.
    pub phase_step: usize,
    pub log: Vec<LogLine>,
}

impl TrainState {
    pub fn finished(&self) -> bool {
        self.phase > 2
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    train: TrainConfig,
    step: usize,
    phase: usize,
    epoch: usize,
    phase_step: usize,
    adam_t: u64,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    rng_word_pos: String,
    log: Vec<LogLine>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    inv: &'a LinguisticInventory,
    phase1: Vec<Utterance>,
    phase2: Vec<Utterance>,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, corpus: &[Utterance], inv: &'a LinguisticInventory) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = Model::new(&cfg.effective_model(), cfg.seed)?;
        let opt = AdamW::new(cfg.adamw(), model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let state = TrainState {
            model,
            opt,
            rng,
            step: 0,
            phase: 1,
            epoch: 0,
            phase_step: 0,
            log: Vec::new(),
        };
        Self::with_state(cfg, corpus, inv, state)
    }

    fn with_state(cfg: TrainConfig, corpus: &[Utterance], inv: &'a LinguisticInventory, state: TrainState) -> Result<Self, TrainError> {
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mut t = Self {
            phase1: filter_by_length(corpus, cfg.phase1_max_frames),
            phase2: corpus.to_vec(),
            cfg,
            inv,
            state,
        };
        t.skip_empty_phases();
        Ok(t)
    }

    pub fn resume(ckpt: &Checkpoint, corpus: &[Utterance], inv: &'a LinguisticInventory) -> Result<Self, TrainError> {
        let meta: CheckpointMeta =
            serde_json::from_value(ckpt.meta.clone()).map_err(|e| TrainError::Checkpoint(format!("not a training checkpoint: {e}")))?;
        let model = ckpt.to_model()?;
        let mut opt = AdamW::new(meta.train.adamw(), model.params());
        opt.t = meta.adam_t;
        for (i, p) in model.params().iter().enumerate() {
            for (slot, prefix) in [(&mut opt.m[i], "adam.m/"), (&mut opt.v[i], "adam.v/")] {
                let name = format!("{prefix}{}", p.name);
                *slot = ckpt
                    .tensor(&name)
                    .cloned()
                    .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor {name}")))?;
            }
        }
        let seed: [u8; 32] = meta
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| TrainError::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.rng_stream);
        rng.set_word_pos(
            meta.rng_word_pos
                .parse()
                .map_err(|_| TrainError::Checkpoint("bad rng position".into()))?,
        );
        let state = TrainState {
            model,
            opt,
            rng,
            step: meta.step,
            phase: meta.phase,
            epoch: meta.epoch,
            phase_step: meta.phase_step,
            log: meta.log,
        };
        Self::with_state(meta.train, corpus, inv, state)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        let meta = CheckpointMeta {
            train: self.cfg.clone(),
            step: s.step,
            phase: s.phase,
            epoch: s.epoch,
            phase_step: s.phase_step,
            adam_t: s.opt.t,
            rng_seed: s.rng.get_seed().to_vec(),
            rng_stream: s.rng.get_stream(),
            rng_word_pos: s.rng.get_word_pos().to_string(),
            log: s.log.clone(),
        };
        let mut ckpt = Checkpoint::from_model(&s.model, serde_json::to_value(meta).expect("meta serializes"));
        for (i, p) in s.model.params().iter().enumerate() {
            ckpt.tensors.push((format!("adam.m/{}", p.name), s.opt.m[i].clone()));
            ckpt.tensors.push((format!("adam.v/{}", p.name), s.opt.v[i].clone()));
        }
        ckpt
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn phase_set(&self) -> &[Utterance] {
        if self.state.phase == 1 {
            &self.phase1
        } else {
            &self.phase2
        }
    }

    fn phase_epochs(&self) -> usize {
        if self.state.phase == 1 {
            self.cfg.epochs_phase1
        } else {
            self.cfg.epochs_phase2
        }
    }

    fn steps_per_epoch(&self) -> usize {
        self.phase_set().len().div_ceil(self.cfg.batch_size)
    }

    fn skip_empty_phases(&mut self) {
        while !self.state.finished() && (self.phase_epochs() == 0 || self.phase_set().is_empty() || self.state.epoch >= self.phase_epochs()) {
            self.state.phase += 1;
            self.state.epoch = 0;
            self.state.phase_step = 0;
        }
    }

    fn capped(&self) -> bool {
        self.cfg.max_steps > 0 && self.state.step >= self.cfg.max_steps
    }

    pub fn done(&self) -> bool {
        self.state.finished() || self.capped()
    }

    /// Runs one epoch of the current phase; returns the lines it logged,
    /// or `None` once training is over.
    pub fn run_epoch(&mut self) -> Result<Option<Vec<LogLine>>, TrainError> {
        if self.done() {
            return Ok(None);
        }
        let first = self.state.log.len();
        let phase = self.state.phase;
        let total_steps = self.phase_epochs() * self.steps_per_epoch();
        let peak = if phase == 1 { self.cfg.lr_phase1 } else { self.cfg.lr_phase2 };
        let mut order: Vec<usize> = (0..self.phase_set().len()).collect();
        order.shuffle(&mut self.state.rng);
        for chunk in order.chunks(self.cfg.batch_size) {
            if self.capped() {
                break;
            }
            let lr = lr_schedule(self.state.phase_step + 1, self.cfg.warmup_steps, total_steps, peak);
            let record = self.train_step(chunk, lr)?;
            self.state.log.push(LogLine::Step(record));
        }
        self.state.epoch += 1;
        let train_cer = self.sample_cer()?;
        self.state.log.push(LogLine::Epoch(EpochRecord {
            phase,
            epoch: self.state.epoch,
            step: self.state.step,
            utterances: self.phase_set().len(),
            train_cer,
        }));
        self.skip_empty_phases();
        Ok(Some(self.state.log[first..].to_vec()))
    }

    /// Runs to completion, calling `on_epoch` after every epoch.
    pub fn run<F>(&mut self, mut on_epoch: F) -> Result<(), TrainError>
    where
        F: FnMut(&Trainer<'a>, &[LogLine]) -> Result<(), TrainError>,
    {
        while let Some(lines) = self.run_epoch()? {
            on_epoch(self, &lines)?;
        }
        Ok(())
    }

    fn train_step(&mut self, indices: &[usize], lr: f64) -> Result<StepRecord, TrainError> {
        let phase = self.state.phase;
        let mut picked: Vec<Utterance> = indices.iter().map(|&i| self.phase_set()[i].clone()).collect();
        if phase == 2 {
            for u in &mut picked {
                time_mask(&mut u.features, &mut self.state.rng, self.cfg.time_mask_prob, self.cfg.time_mask_max_width);
            }
        }
        let refs: Vec<&Utterance> = picked.iter().collect();
        let batch = Batch::from_utterances(&refs);
        let masks = DropMasks::sample(&mut self.state.rng, batch.size(), self.state.model.config().p_drop);
        let step = self.state.step;

        let tape = Tape::new();
        let bound = Bound::trainable(&tape, self.state.model.params());
        let out = compute_loss(&self.state.model, &bound, &batch, &masks, &self.cfg.loss, !self.cfg.disable_align, self.inv)
            .map_err(|e| e.at_step(step))?;
        let b = out.bundle;
        for (component, value) in [
            ("char_ctc", b.char_ctc),
            ("char_attn", b.char_attn),
            ("phoneme_ctc", b.phoneme_ctc),
            ("viseme_ctc", b.viseme_ctc),
            ("align", b.align),
            ("total", b.total),
        ] {
            if !value.is_finite() {
                return Err(TrainError::NonFinite { step, component, value });
            }
        }
        let logged = out.total.item();
        if (logged - b.total).abs() > 1e-12 {
            return Err(TrainError::Inconsistent {
                step,
                logged,
                recombined: b.total,
            });
        }
        let mut grads = tape.backward(out.total).map_err(ModelError::from)?;
        let mut per_param = bound.gradients(&mut grads);
        drop(bound);
        let grad_norm = clip_global_norm(&mut per_param, self.cfg.grad_clip);
        self.state.opt.step(self.state.model.params_mut(), &per_param, lr);
        self.state.step += 1;
        self.state.phase_step += 1;
        Ok(StepRecord {
            step: self.state.step,
            phase,
            epoch: self.state.epoch + 1,
            lr,
            char_ctc: b.char_ctc,
            char_attn: b.char_attn,
            char_hybrid: b.char_hybrid,
            phoneme_ctc: b.has_phoneme_ctc.then_some(b.phoneme_ctc),
            viseme_ctc: b.has_viseme_ctc.then_some(b.viseme_ctc),
            align: b.has_align.then_some(b.align),
            total: logged,
            grad_norm,
        })
    }

    fn sample_cer(&self) -> Result<Option<f64>, TrainError> {
        let set = self.phase_set();
        let n = self.cfg.cer_sample.min(set.len());
        if n == 0 {
            return Ok(None);
        }
        Ok(Some(corpus_cer(&self.state.model, &set[..n], self.cfg.batch_size)?))
    }
}

/// Corpus CER (total edits over total reference length) of batched CTC
/// greedy decoding with every branch the model has.
pub fn corpus_cer(model: &Model, corpus: &[Utterance], batch_size: usize) -> Result<f64, TrainError> {
    let act = model.full_activation();
    let (mut edits, mut total) = (0usize, 0usize);
    for chunk in corpus.chunks(batch_size.max(1)) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let batch = Batch::from_utterances(&refs);
        let hyps = model.greedy_batch(&batch, act)?;
        for (h, r) in hyps.iter().zip(&batch.char_targets) {
            if let Ok(rep) = cer(r, h) {
                edits += rep.edits();
                total += rep.ref_len;
            }
        }
    }
    Ok(edits as f64 / total.max(1) as f64)
}

/// Trains to completion and returns the final state.
pub fn train(cfg: TrainConfig, corpus: &[Utterance], inv: &LinguisticInventory) -> Result<TrainState, TrainError> {
    let mut t = Trainer::new(cfg, corpus, inv)?;
    t.run(|_, _| Ok(()))?;
    Ok(t.into_state())
}
