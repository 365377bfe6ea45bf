//! Oracle suites: brute-force CTC enumeration, a dense alignment-loss
//! reference, edit-distance DP for CER, and finite-difference gradient
//! checks of every loss and of the full model.

pub mod oracles;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data_synth::{generate_corpus, SynthConfig};
use crate::decode_metrics::cer;
use crate::diffcore::{central_difference, Array, DiffError, Tape, Var};
use crate::linguistics::{Lexicon, LinguisticInventory};
use crate::losses::{
    align_loss, align_loss_var, attention_ce_batch_var, ctc_batch_var, ctc_loss_var, LossConfig, LossError,
    MappingSource,
};
use crate::losses::ctc::ctc_nll_and_grad;
use crate::model::{Batch, Bound, DropMasks, Model, ModelConfig};
use crate::trainer::compute_loss;

use oracles::AlignSample;

pub const CTC_TOLERANCE: f64 = 1e-10;
pub const ALIGN_TOLERANCE: f64 = 1e-10;
pub const LOSS_GRAD_TOLERANCE: f64 = 1e-4;
pub const MODEL_GRAD_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Runs the CTC suite against a recursion with a broken extended
    /// label sequence. The suite must then fail.
    pub inject_ctc_fault: bool,
    /// Random instances per gradient check.
    pub grad_instances: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            inject_ctc_fault: false,
            grad_instances: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

struct Tally {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    max_error: f64,
    failure: Option<String>,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            cases: 0,
            max_error: 0.0,
            failure: None,
            start: Instant::now(),
        }
    }

    fn record(&mut self, err: f64, describe: impl FnOnce() -> String) {
        self.cases += 1;
        let bad = !(err <= self.tolerance);
        if err > self.max_error || err.is_nan() {
            self.max_error = err;
        }
        if bad && self.failure.is_none() {
            self.failure = Some(describe());
        }
    }

    fn fail(&mut self, msg: String) {
        self.cases += 1;
        if self.failure.is_none() {
            self.failure = Some(msg);
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name.to_string(),
            passed: self.failure.is_none() && self.cases > 0,
            cases: self.cases,
            max_error: self.max_error,
            tolerance: self.tolerance,
            seconds: self.start.elapsed().as_secs_f64(),
            failure: self.failure,
        }
    }
}

fn normal_array<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Array::new(shape, data).expect("sized")
}

/// Every `(T <= 6, K <= 4, L <= 3)` with 20 random logit draws, comparing
/// `exp(-loss)` with exhaustive path enumeration.
pub fn ctc_enumeration_suite(opts: &VerifyOptions) -> SuiteResult {
    let mut tally = Tally::new("ctc_enumeration", CTC_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for t in 1..=6 {
        for k in 2..=4 {
            for l in 0..=3 {
                for _ in 0..20 {
                    let target: Vec<usize> = (0..l).map(|_| rng.random_range(1..k)).collect();
                    let logits = normal_array(&mut rng, &[t, k], 2.0);
                    let oracle = oracles::ctc_probability(&logits, &target);
                    let ours = match ctc_nll_and_grad(logits.data(), t, k, &target, opts.inject_ctc_fault) {
                        Ok((nll, _)) => (-nll).exp(),
                        Err(LossError::NoValidPath { .. }) => 0.0,
                        Err(e) => {
                            tally.fail(format!("T={t} K={k} target={target:?}: {e}"));
                            continue;
                        }
                    };
                    let err = (ours - oracle).abs();
                    tally.record(err, || format!("T={t} K={k} target={target:?}: loss gives {ours:e}, enumeration {oracle:e}"));
                }
            }
        }
    }
    tally.finish()
}

/// Random class sequences where about half the frames are compatible.
fn random_classes<R: Rng>(rng: &mut R, inv: &LinguisticInventory, t: usize) -> (Vec<usize>, Vec<usize>) {
    let mut vis = Vec::with_capacity(t);
    let mut ph = Vec::with_capacity(t);
    for _ in 0..t {
        let p = rng.random_range(0..inv.num_phonemes());
        ph.push(p);
        vis.push(if rng.random_bool(0.6) {
            inv.viseme_of(p)
        } else {
            rng.random_range(0..inv.num_visemes())
        });
    }
    (vis, ph)
}

struct AlignInstance {
    v: Array,
    p: Array,
    vis: Vec<Vec<usize>>,
    ph: Vec<Vec<usize>>,
    cfg: LossConfig,
}

fn random_align_instance<R: Rng>(rng: &mut R, inv: &LinguisticInventory, max_t: usize, max_c: usize) -> AlignInstance {
    let b = rng.random_range(1..=3);
    let c = rng.random_range(1..=max_c);
    let lens: Vec<usize> = (0..b).map(|_| rng.random_range(1..=max_t)).collect();
    let t = *lens.iter().max().expect("b >= 1");
    let mut v = normal_array(rng, &[b, t, c], 1.0);
    let mut p = normal_array(rng, &[b, t, c], 1.0);
    // Padding frames carry garbage on purpose: they must be ignored.
    for (bi, &len) in lens.iter().enumerate() {
        for ti in len..t {
            for ci in 0..c {
                v.set(&[bi, ti, ci], 1e3);
                p.set(&[bi, ti, ci], -1e3);
            }
        }
    }
    let (vis, ph): (Vec<_>, Vec<_>) = lens.iter().map(|&len| random_classes(rng, inv, len)).unzip();
    let cfg = LossConfig {
        window_w: [1, 3, 5][rng.random_range(0..3)],
        tau: rng.random_range(0.05..1.0),
        ..LossConfig::default()
    };
    AlignInstance { v, p, vis, ph, cfg }
}

fn rows_of(a: &Array, b: usize, len: usize) -> Vec<Vec<f64>> {
    let (t, c) = (a.shape()[1], a.shape()[2]);
    (0..len).map(|ti| a.data()[(b * t + ti) * c..(b * t + ti + 1) * c].to_vec()).collect()
}

fn dense_oracle(inst: &AlignInstance, inv: &LinguisticInventory) -> f64 {
    let rows: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = inst
        .vis
        .iter()
        .enumerate()
        .map(|(b, cls)| (rows_of(&inst.v, b, cls.len()), rows_of(&inst.p, b, cls.len())))
        .collect();
    let samples: Vec<AlignSample<'_>> = rows
        .iter()
        .zip(inst.vis.iter().zip(&inst.ph))
        .map(|((v, p), (vc, pc))| AlignSample {
            v,
            p,
            viseme_classes: vc,
            phoneme_classes: pc,
        })
        .collect();
    oracles::dense_align_loss(&samples, inv, inst.cfg.window_w, inst.cfg.tau, inst.cfg.epsilon)
}

/// 200 random batches (B <= 3, T <= 8, C <= 8, w in {1, 3, 5}) against
/// the dense reference.
pub fn align_dense_suite(opts: &VerifyOptions, inv: &LinguisticInventory) -> SuiteResult {
    let mut tally = Tally::new("align_dense", ALIGN_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    for case in 0..200 {
        let inst = random_align_instance(&mut rng, inv, 8, 8);
        let oracle = dense_oracle(&inst, inv);
        match align_loss(&inst.v, &inst.p, &inst.vis, &inst.ph, inv, &inst.cfg) {
            Ok(ours) => {
                let err = (ours - oracle).abs();
                tally.record(err, || format!("case {case}: loss {ours}, dense {oracle}"));
            }
            Err(e) => tally.fail(format!("case {case}: {e}")),
        }
    }
    tally.finish()
}

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

/// Reference and hypotheses of the qualitative decoding example,
/// with the CER each row reports.
pub const TABLE_VI: [(&str, &str, f64); 4] = [
    ("f", "国务院督查组将陆续展开", 0.4545),
    ("f+p", "国务院督查组将突出整改", 0.2727),
    ("f+v", "国务院督查组将图书整改", 0.2727),
    ("f+p+v", "国务院督查组将督促整改", 0.0909),
];
pub const TABLE_VI_REFERENCE: &str = "国务院督察组将督促整改";

/// 1000 random pairs against Levenshtein DP, plus the printed rows.
pub fn cer_dp_suite(opts: &VerifyOptions) -> SuiteResult {
    let mut tally = Tally::new("cer_dp", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    for case in 0..1000 {
        let n = rng.random_range(1..=12);
        let m = rng.random_range(0..=12);
        let r: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let h: Vec<u8> = (0..m).map(|_| rng.random_range(0..4)).collect();
        let dist = oracles::edit_distance(&r, &h);
        match cer(&r, &h) {
            Ok(rep) => {
                let consistent = rep.edits() == dist
                    && rep.deletions + m == rep.insertions + n
                    && rep.substitutions + rep.deletions <= n
                    && rep.cer == dist as f64 / n as f64;
                tally.record(if consistent { 0.0 } else { 1.0 }, || {
                    format!("case {case}: ref {r:?} hyp {h:?}: got {rep:?}, distance {dist}")
                });
            }
            Err(e) => tally.fail(format!("case {case}: {e}")),
        }
    }
    let reference = chars(TABLE_VI_REFERENCE);
    for (row, hyp, printed) in TABLE_VI {
        match cer(&reference, &chars(hyp)) {
            Ok(rep) => {
                let same = format!("{:.4}", rep.cer) == format!("{printed:.4}");
                tally.record(if same { 0.0 } else { 1.0 }, || format!("row {row}: {:.4} vs printed {printed:.4}", rep.cer));
            }
            Err(e) => tally.fail(format!("row {row}: {e}")),
        }
    }
    tally.finish()
}

/// Largest coordinate error, relative to the largest gradient entry.
pub fn gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

fn check_leaf_gradient<F>(x: &Array, f: F) -> Result<f64, DiffError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, DiffError>,
{
    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = f(&tape, leaf)?;
        tape.backward(out)?.get(leaf).into_data()
    };
    let coords: Vec<usize> = (0..x.len()).collect();
    let shape = x.shape().to_vec();
    let numeric = central_difference(
        |probe| {
            let tape = Tape::new();
            Ok(f(&tape, tape.constant(Array::new(&shape, probe.to_vec())?))?.item())
        },
        x.data(),
        &coords,
        FD_STEP,
    )?;
    Ok(gradient_error(&analytic, &numeric))
}

fn loss_err(e: LossError) -> DiffError {
    match e {
        LossError::Diff(d) => d,
        other => DiffError::InvalidArgument(other.to_string()),
    }
}

fn random_target<R: Rng>(rng: &mut R, k: usize, t: usize) -> Vec<usize> {
    loop {
        let l = rng.random_range(1..=t.div_ceil(2).max(1));
        let target: Vec<usize> = (0..l).map(|_| rng.random_range(1..k)).collect();
        if crate::losses::min_frames(&target) <= t {
            return target;
        }
    }
}

fn grad_suite<F>(name: &'static str, tolerance: f64, instances: usize, mut one: F) -> SuiteResult
where
    F: FnMut(usize) -> Result<f64, DiffError>,
{
    let mut tally = Tally::new(name, tolerance);
    for case in 0..instances {
        match one(case) {
            Ok(err) => tally.record(err, || format!("instance {case}: relative error {err:e}")),
            Err(e) => tally.fail(format!("instance {case}: {e}")),
        }
    }
    tally.finish()
}

pub fn ctc_gradient_suite(opts: &VerifyOptions) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    grad_suite("grad_ctc", LOSS_GRAD_TOLERANCE, opts.grad_instances, |_| {
        let t = rng.random_range(2..=6);
        let k = rng.random_range(2..=5);
        let target = random_target(&mut rng, k, t);
        let x = normal_array(&mut rng, &[t, k], 1.0);
        check_leaf_gradient(&x, |_, v| ctc_loss_var(v, &target).map_err(loss_err))
    })
}

pub fn attention_gradient_suite(opts: &VerifyOptions) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(4));
    grad_suite("grad_attention_ce", LOSS_GRAD_TOLERANCE, opts.grad_instances, |_| {
        let b = rng.random_range(1..=3);
        let l = rng.random_range(1..=5);
        let k = rng.random_range(2..=6);
        let targets: Vec<Vec<usize>> = (0..b)
            .map(|_| {
                let n = rng.random_range(1..=l);
                (0..n).map(|_| rng.random_range(0..k)).collect()
            })
            .collect();
        let x = normal_array(&mut rng, &[b, l, k], 1.0);
        check_leaf_gradient(&x, |_, v| attention_ce_batch_var(v, &targets).map_err(loss_err))
    })
}

/// Splits a `[2, B, T, C]` leaf into the viseme and phoneme halves.
fn halves<'t>(x: Var<'t>) -> Result<(Var<'t>, Var<'t>), DiffError> {
    let s = x.shape();
    let inner = [s[1], s[2], s[3]];
    Ok((x.slice(0, 0, 1)?.reshape(&inner)?, x.slice(0, 1, 1)?.reshape(&inner)?))
}

pub fn align_gradient_suite(opts: &VerifyOptions, inv: &LinguisticInventory) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(5));
    grad_suite("grad_align", LOSS_GRAD_TOLERANCE, opts.grad_instances, |_| {
        let mut inst = random_align_instance(&mut rng, inv, 6, 8);
        inst.cfg.tau = rng.random_range(0.2..1.0);
        let shape = inst.v.shape().to_vec();
        let mut both = inst.v.data().to_vec();
        both.extend_from_slice(inst.p.data());
        // Keep padding finite but small so the probes stay well scaled.
        let x = Array::new(&[2, shape[0], shape[1], shape[2]], both.iter().map(|v| v.clamp(-3.0, 3.0)).collect())?;
        check_leaf_gradient(&x, |_, leaf| {
            let (v, p) = halves(leaf)?;
            align_loss_var(v, p, &inst.vis, &inst.ph, inv, &inst.cfg).map_err(loss_err)
        })
    })
}

/// The weighted objective over CTC, attention and alignment terms, all
/// read from one leaf.
pub fn total_gradient_suite(opts: &VerifyOptions, inv: &LinguisticInventory) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(6));
    grad_suite("grad_total", LOSS_GRAD_TOLERANCE, opts.grad_instances, |_| {
        let b = rng.random_range(1..=2);
        let t = rng.random_range(3..=6);
        let k = inv.num_phonemes().min(6);
        let lens: Vec<usize> = (0..b).map(|_| rng.random_range(2..=t)).collect();
        let ctc_targets: Vec<Vec<usize>> = lens.iter().map(|&len| random_target(&mut rng, k, len)).collect();
        let attn: Vec<Vec<usize>> = (0..b).map(|_| vec![rng.random_range(0..k); rng.random_range(1..=3)]).collect();
        let (vis, ph): (Vec<_>, Vec<_>) = lens.iter().map(|&len| random_classes(&mut rng, inv, len)).unzip();
        let cfg = LossConfig {
            alpha: rng.random_range(0.0..1.0),
            lambda1: rng.random_range(0.1..2.0),
            lambda2: rng.random_range(0.1..2.0),
            tau: rng.random_range(0.2..1.0),
            window_w: 3,
            ..LossConfig::default()
        };
        // rows: char CTC, phoneme CTC, viseme CTC, attention, then the
        // two alignment feature blocks, each [B, T, K].
        let x = normal_array(&mut rng, &[6, b, t, k], 1.0);
        check_leaf_gradient(&x, |_, leaf| {
            let part = |i: usize| leaf.slice(0, i, 1)?.reshape(&[b, t, k]);
            let ctc = ctc_batch_var(part(0)?, &lens, &ctc_targets).map_err(loss_err)?;
            let pc = ctc_batch_var(part(1)?, &lens, &ctc_targets).map_err(loss_err)?;
            let vc = ctc_batch_var(part(2)?, &lens, &ctc_targets).map_err(loss_err)?;
            let at = attention_ce_batch_var(part(3)?.slice(1, 0, 3)?, &attn).map_err(loss_err)?;
            let al = align_loss_var(part(4)?, part(5)?, &vis, &ph, inv, &cfg).map_err(loss_err)?;
            at.scale(cfg.alpha)?
                .add(ctc.scale(1.0 - cfg.alpha)?)?
                .add(al.scale(cfg.lambda1)?)?
                .add(pc.add(vc)?.scale(cfg.lambda2)?)
        })
    })
}

/// A model small enough to probe by finite differences.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        input_dim: 4,
        feature_dim: 8,
        ffn_dim: 12,
        trunk_layers: 1,
        branch_layers: 1,
        char_encoder_layers: 1,
        char_decoder_layers: 1,
        attention_heads: 2,
        num_chars: 4,
        max_frames: 32,
        max_decode_len: 6,
        ..ModelConfig::default()
    }
}

/// End-to-end check: gradients of the full training objective with
/// respect to randomly chosen model parameters. The mapping matrix uses
/// label classes so the objective is smooth in the parameters.
pub fn model_gradient_suite(opts: &VerifyOptions, inv: &LinguisticInventory) -> SuiteResult {
    let lexicon = Lexicon::bundled(inv).truncated(4);
    let mcfg = toy_model_config();
    let cfg = LossConfig {
        mapping_source: MappingSource::Labels,
        ..LossConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(7));
    grad_suite("grad_model", MODEL_GRAD_TOLERANCE, opts.grad_instances, |case| {
        let synth = SynthConfig {
            seed: opts.seed.wrapping_add(case as u64),
            num_utterances: 2,
            char_vocab_size: 4,
            sentence_len_min: 1,
            sentence_len_max: 2,
            frames_per_phoneme_min: 2,
            frames_per_phoneme_max: 3,
            silence_max: 1,
            feature_dim: mcfg.input_dim,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&synth, inv, &lexicon).map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
        let refs: Vec<_> = corpus.iter().collect();
        let batch = Batch::from_utterances(&refs);
        let mut model = Model::new(&mcfg, opts.seed.wrapping_add(100 + case as u64)).map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
        let masks = DropMasks::sample(&mut rng, batch.size(), mcfg.p_drop);
        let objective = |m: &Model, train: bool| -> Result<(f64, Vec<Option<Array>>), DiffError> {
            let tape = Tape::new();
            let bound = if train { Bound::trainable(&tape, m.params()) } else { Bound::frozen(&tape, m.params()) };
            let out = compute_loss(m, &bound, &batch, &masks, &cfg, true, inv).map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
            let value = out.total.item();
            if !train {
                return Ok((value, Vec::new()));
            }
            let mut grads = tape.backward(out.total)?;
            Ok((value, bound.gradients(&mut grads)))
        };
        let (_, grads) = objective(&model, true)?;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..4 {
            let pi = rng.random_range(0..model.params().len());
            let n = model.params().iter().nth(pi).expect("in range").value.len();
            let ci = rng.random_range(0..n);
            analytic.push(grads[pi].as_ref().map_or(0.0, |g| g.data()[ci]));
            let orig = model.params().iter().nth(pi).expect("in range").value.data()[ci];
            let mut probe = |delta: f64| -> Result<f64, DiffError> {
                model.params_mut().iter_mut().nth(pi).expect("in range").value.data_mut()[ci] = orig + delta;
                objective(&model, false).map(|r| r.0)
            };
            let plus = probe(FD_STEP)?;
            let minus = probe(-FD_STEP)?;
            probe(0.0)?;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        let full_scale = grads.iter().flatten().flat_map(|g| g.data().iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * full_scale).max(1e-8))
            .fold(0.0, f64::max);
        Ok(err)
    })
}

pub fn gradient_suites(opts: &VerifyOptions, inv: &LinguisticInventory) -> Vec<SuiteResult> {
    vec![
        ctc_gradient_suite(opts),
        attention_gradient_suite(opts),
        align_gradient_suite(opts, inv),
        total_gradient_suite(opts, inv),
        model_gradient_suite(opts, inv),
    ]
}

pub fn run_all(opts: &VerifyOptions, inv: &LinguisticInventory) -> Vec<SuiteResult> {
    let mut out = vec![ctc_enumeration_suite(opts), align_dense_suite(opts, inv), cer_dp_suite(opts)];
    out.extend(gradient_suites(opts, inv));
    out
}
