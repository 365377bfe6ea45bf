use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::Batch;
use super::layers::{causal_padding, frame_mask, key_padding, zero_padding, Attention, ConformerBlock, DecoderBlock, FeedForward, LayerNorm, Linear};
use super::params::{Bound, Group, ParamId, ParamStore};
use super::{ActivationConfig, ModelConfig, ModelError};
use crate::decode_metrics::{attention_greedy_decode, ctc_beam_decode, ctc_greedy_decode, frame_argmax, BranchFrames, Hypothesis, StepDecoder};
use crate::diffcore::{Array, DiffError, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchKind {
    Phoneme,
    Viseme,
}

impl BranchKind {
    pub fn group(self) -> Group {
        match self {
            BranchKind::Phoneme => Group::Phoneme,
            BranchKind::Viseme => Group::Viseme,
        }
    }
}

#[derive(Debug, Clone)]
struct Branch {
    blocks: Vec<ConformerBlock>,
    head: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    input: Linear,
    pos: ParamId,
    trunk_ff: Vec<(FeedForward, LayerNorm)>,
    trunk_attn_ln: LayerNorm,
    trunk_attn: Attention,
    trunk_out_ln: LayerNorm,
    phoneme: Option<Branch>,
    viseme: Option<Branch>,
    encoder: Vec<ConformerBlock>,
    ctc_head: Linear,
    embed: ParamId,
    dec_pos: ParamId,
    decoder: Vec<DecoderBlock>,
    dec_ln: LayerNorm,
    attn_head: Linear,
}

/// Branch keep decisions for one training batch, one per element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropMasks {
    pub phoneme: Vec<bool>,
    pub viseme: Vec<bool>,
}

impl DropMasks {
    pub fn ones(b: usize) -> Self {
        Self {
            phoneme: vec![true; b],
            viseme: vec![true; b],
        }
    }

    /// Each branch is kept with probability `1 - p_drop`, independently
    /// per batch element and branch.
    pub fn sample<R: Rng>(rng: &mut R, b: usize, p_drop: f64) -> Self {
        let keep = 1.0 - p_drop;
        let mut draw = || (0..b).map(|_| rng.random::<f64>() < keep).collect::<Vec<_>>();
        let phoneme = draw();
        let viseme = draw();
        Self { phoneme, viseme }
    }
}

/// How branch features enter the fusion.
#[derive(Debug, Clone, Copy)]
pub enum Fusion<'a> {
    /// Sampled masks with inverted `1 / (1 - p_drop)` scaling.
    Train(&'a DropMasks),
    /// Active branches enter unscaled, the rest are skipped.
    Infer(ActivationConfig),
}

pub struct ForwardOutputs<'t> {
    pub f: Var<'t>,
    pub p: Option<Var<'t>>,
    pub v: Option<Var<'t>>,
    pub fused: Var<'t>,
    pub mem: Var<'t>,
    pub phoneme_logits: Option<Var<'t>>,
    pub viseme_logits: Option<Var<'t>>,
    pub char_ctc_logits: Var<'t>,
    pub char_attn_logits: Option<Var<'t>>,
}

/// The pre-nonlinearity fusion sum `F + P * B_p + V * B_v`. `masks` of
/// `None` means every present branch is kept unscaled.
pub fn fuse_sum<'t>(f: Var<'t>, p: Option<Var<'t>>, v: Option<Var<'t>>, masks: Option<&DropMasks>, p_drop: f64) -> Result<Var<'t>, ModelError> {
    let shape = f.shape();
    let (b, per) = (shape[0], shape[1..].iter().product::<usize>());
    let tape = f.tape();
    let mut acc = f;
    for (branch, keep) in [(p, masks.map(|m| &m.phoneme)), (v, masks.map(|m| &m.viseme))] {
        let Some(x) = branch else { continue };
        if x.shape() != shape {
            return Err(ModelError::Shape(format!("fusion input {:?} vs {:?}", x.shape(), shape)));
        }
        let x = match keep {
            None => x,
            Some(keep) => {
                let scale = 1.0 / (1.0 - p_drop);
                let data = keep
                    .iter()
                    .flat_map(|&k| std::iter::repeat_n(if k { scale } else { 0.0 }, per))
                    .collect();
                x.mul(tape.constant(Array::new(&shape, data)?))?
            }
        };
        debug_assert_eq!(keep.map_or(b, |k| k.len()), b);
        acc = acc.add(x)?;
    }
    Ok(acc)
}

/// `silu(F + P * B_p + V * B_v)`.
pub fn fuse<'t>(f: Var<'t>, p: Option<Var<'t>>, v: Option<Var<'t>>, masks: Option<&DropMasks>, p_drop: f64) -> Result<Var<'t>, ModelError> {
    Ok(fuse_sum(f, p, v, masks, p_drop)?.silu()?)
}

/// Character decoding strategy for [`Model::forward_infer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMethod {
    CtcGreedy,
    CtcBeam(usize),
    Attention,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = cfg.feature_dim;
        let (hid, heads, k) = (cfg.ffn_dim, cfg.attention_heads, cfg.conv_kernel);
        let input = Linear::new(&mut s, &mut rng, "trunk.input", Group::Trunk, cfg.input_dim, c);
        let pos = s.add_weight(&mut rng, "trunk.pos".into(), Group::Trunk, &[cfg.max_frames, c], 0.1);
        let trunk_ff = (0..cfg.trunk_layers)
            .map(|i| {
                (
                    FeedForward::new(&mut s, &mut rng, &format!("trunk.ff{i}"), Group::Trunk, c, hid),
                    LayerNorm::new(&mut s, &format!("trunk.ff{i}.out_ln"), Group::Trunk, c),
                )
            })
            .collect();
        let trunk_attn_ln = LayerNorm::new(&mut s, "trunk.attn_ln", Group::Trunk, c);
        let trunk_attn = Attention::new(&mut s, &mut rng, "trunk.attn", Group::Trunk, c, heads);
        let trunk_out_ln = LayerNorm::new(&mut s, "trunk.out_ln", Group::Trunk, c);
        let branch = |s: &mut ParamStore, rng: &mut ChaCha8Rng, kind: BranchKind, classes: usize| {
            let g = kind.group();
            Branch {
                blocks: (0..cfg.branch_layers)
                    .map(|i| ConformerBlock::new(s, rng, &format!("{g}.block{i}"), g, c, hid, heads, k))
                    .collect(),
                head: Linear::new(s, rng, &format!("{g}.head"), g, c, classes),
            }
        };
        let (phoneme, viseme) = if cfg.with_branches {
            let p = branch(&mut s, &mut rng, BranchKind::Phoneme, cfg.phoneme_vocab);
            let v = branch(&mut s, &mut rng, BranchKind::Viseme, cfg.viseme_vocab);
            (Some(p), Some(v))
        } else {
            (None, None)
        };
        let encoder = (0..cfg.char_encoder_layers)
            .map(|i| ConformerBlock::new(&mut s, &mut rng, &format!("char_encoder.block{i}"), Group::CharEncoder, c, hid, heads, k))
            .collect();
        let kc = cfg.char_classes();
        let ctc_head = Linear::new(&mut s, &mut rng, "heads.ctc", Group::Heads, c, kc);
        let embed = s.add_weight(&mut rng, "char_decoder.embed".into(), Group::CharDecoder, &[kc, c], 1.0);
        let dec_pos = s.add_weight(&mut rng, "char_decoder.pos".into(), Group::CharDecoder, &[cfg.max_decode_len + 2, c], 0.1);
        let decoder = (0..cfg.char_decoder_layers)
            .map(|i| DecoderBlock::new(&mut s, &mut rng, &format!("char_decoder.block{i}"), Group::CharDecoder, c, hid, heads))
            .collect();
        let dec_ln = LayerNorm::new(&mut s, "char_decoder.out_ln", Group::CharDecoder, c);
        let attn_head = Linear::new(&mut s, &mut rng, "heads.attn", Group::Heads, c, kc);
        Ok(Self {
            cfg: cfg.clone(),
            store: s,
            layout: Layout {
                input,
                pos,
                trunk_ff,
                trunk_attn_ln,
                trunk_attn,
                trunk_out_ln,
                phoneme,
                viseme,
                encoder,
                ctc_head,
                embed,
                dec_pos,
                decoder,
                dec_ln,
                attn_head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_branch(&self, kind: BranchKind) -> bool {
        self.store.has_group(kind.group())
    }

    /// Parameters on the executed path for an activation config. Absent
    /// branches count zero.
    pub fn count_active_params(&self, act: ActivationConfig) -> usize {
        let mut n = [Group::Trunk, Group::Fusion, Group::CharEncoder, Group::CharDecoder, Group::Heads]
            .iter()
            .map(|&g| self.store.count(g))
            .sum::<usize>();
        if act.use_phoneme {
            n += self.store.count(Group::Phoneme);
        }
        if act.use_viseme {
            n += self.store.count(Group::Viseme);
        }
        n
    }

    /// Shared features `F: [B, T, C]` from `[B, T, C_in]` input.
    pub fn trunk_forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>, lengths: &[usize]) -> Result<Var<'t>, ModelError> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.cfg.input_dim || shape[0] != lengths.len() {
            return Err(ModelError::Shape(format!(
                "trunk expects [B, T, {}] with {} lengths, got {shape:?}",
                self.cfg.input_dim,
                lengths.len()
            )));
        }
        let (b, t, c) = (shape[0], shape[1], self.cfg.feature_dim);
        if t > self.cfg.max_frames {
            return Err(ModelError::Shape(format!("{t} frames exceed max_frames {}", self.cfg.max_frames)));
        }
        if lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(ModelError::Shape(format!("lengths {lengths:?} must lie in 1..={t}")));
        }
        let mask = frame_mask(lengths, t, c);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = p.tape().gather_rows(p.get(self.layout.pos), &positions)?.reshape(&[b, t, c])?;
        let mut h = zero_padding(self.layout.input.forward(p, x)?.add(pos)?, &mask)?;
        for (ff, ln) in &self.layout.trunk_ff {
            h = zero_padding(ln.forward(p, h.add(ff.forward(p, h)?)?)?, &mask)?;
        }
        let blocked = key_padding(lengths, t, t);
        let a = self.layout.trunk_attn_ln.forward(p, h)?;
        h = h.add(self.layout.trunk_attn.forward(p, a, a, &blocked)?)?;
        Ok(zero_padding(self.layout.trunk_out_ln.forward(p, h)?, &mask)?)
    }

    /// Branch representation and its framewise logits.
    pub fn branch_forward<'t>(&self, p: &Bound<'t, '_>, kind: BranchKind, f: Var<'t>, lengths: &[usize]) -> Result<(Var<'t>, Var<'t>), ModelError> {
        let branch = match kind {
            BranchKind::Phoneme => self.layout.phoneme.as_ref(),
            BranchKind::Viseme => self.layout.viseme.as_ref(),
        }
        .ok_or(ModelError::MissingBranch(kind.group()))?;
        let shape = f.shape();
        let mask = frame_mask(lengths, shape[1], shape[2]);
        let blocked = key_padding(lengths, shape[1], shape[1]);
        let mut h = f;
        for block in &branch.blocks {
            h = block.forward(p, h, &mask, &blocked)?;
        }
        let logits = branch.head.forward(p, h)?;
        Ok((h, logits))
    }

    /// Encoder memory and CTC logits from fused features.
    pub fn encode<'t>(&self, p: &Bound<'t, '_>, fused: Var<'t>, lengths: &[usize]) -> Result<(Var<'t>, Var<'t>), ModelError> {
        let shape = fused.shape();
        let mask = frame_mask(lengths, shape[1], shape[2]);
        let blocked = key_padding(lengths, shape[1], shape[1]);
        let mut h = zero_padding(fused, &mask)?;
        for block in &self.layout.encoder {
            h = block.forward(p, h, &mask, &blocked)?;
        }
        let logits = self.layout.ctc_head.forward(p, h)?;
        Ok((h, logits))
    }

    /// Decoder logits `[B, L, K_c]` for input tokens (start token first),
    /// each sequence valid up to `token_lengths[b]`.
    pub fn decode_tokens<'t>(
        &self,
        p: &Bound<'t, '_>,
        mem: Var<'t>,
        mem_lengths: &[usize],
        tokens: &[Vec<usize>],
    ) -> Result<Var<'t>, ModelError> {
        let b = tokens.len();
        let c = self.cfg.feature_dim;
        let l = tokens.iter().map(Vec::len).max().unwrap_or(0);
        if l == 0 || l > self.cfg.max_decode_len + 2 {
            return Err(ModelError::Shape(format!("decoder input length {l} outside 1..={}", self.cfg.max_decode_len + 2)));
        }
        let eos = self.cfg.eos();
        let lengths: Vec<usize> = tokens.iter().map(Vec::len).collect();
        let flat: Vec<usize> = tokens
            .iter()
            .flat_map(|t| t.iter().copied().chain(std::iter::repeat(eos)).take(l))
            .collect();
        if let Some(&bad) = flat.iter().find(|&&t| t >= self.cfg.char_classes()) {
            return Err(ModelError::Shape(format!("token {bad} outside the char vocabulary")));
        }
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let tape = p.tape();
        let emb = tape.gather_rows(p.get(self.layout.embed), &flat)?.reshape(&[b, l, c])?;
        let pos = tape.gather_rows(p.get(self.layout.dec_pos), &positions)?.reshape(&[b, l, c])?;
        let mut y = emb.add(pos)?;
        let self_blocked = causal_padding(&lengths, l);
        let cross_blocked = key_padding(mem_lengths, l, mem.shape()[1]);
        for block in &self.layout.decoder {
            y = block.forward(p, y, mem, &self_blocked, &cross_blocked)?;
        }
        Ok(self.layout.attn_head.forward(p, self.layout.dec_ln.forward(p, y)?)?)
    }

    /// Full forward pass. Teacher-forced decoder logits are produced when
    /// `teacher` is set, which requires char targets in the batch.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, batch: &Batch, fusion: Fusion<'_>, teacher: bool) -> Result<ForwardOutputs<'t>, ModelError> {
        let tape = p.tape();
        let x = tape.constant(batch.features.clone());
        let f = self.trunk_forward(p, x, &batch.lengths)?;
        let (run_p, run_v) = match fusion {
            Fusion::Train(_) => (self.layout.phoneme.is_some(), self.layout.viseme.is_some()),
            Fusion::Infer(act) => (act.use_phoneme, act.use_viseme),
        };
        let (p_rep, phoneme_logits) = if run_p {
            let (r, l) = self.branch_forward(p, BranchKind::Phoneme, f, &batch.lengths)?;
            (Some(r), Some(l))
        } else {
            (None, None)
        };
        let (v_rep, viseme_logits) = if run_v {
            let (r, l) = self.branch_forward(p, BranchKind::Viseme, f, &batch.lengths)?;
            (Some(r), Some(l))
        } else {
            (None, None)
        };
        let masks = match fusion {
            Fusion::Train(m) => {
                if m.phoneme.len() != batch.size() || m.viseme.len() != batch.size() {
                    return Err(ModelError::Shape("drop masks must have one entry per batch element".into()));
                }
                Some(m)
            }
            Fusion::Infer(_) => None,
        };
        let fused = fuse(f, p_rep, v_rep, masks, self.cfg.p_drop)?;
        let (mem, char_ctc_logits) = self.encode(p, fused, &batch.lengths)?;
        let char_attn_logits = if teacher {
            if !batch.has_targets() {
                return Err(ModelError::MissingTargets);
            }
            let inputs: Vec<Vec<usize>> = batch
                .char_targets
                .iter()
                .map(|t| std::iter::once(self.cfg.eos()).chain(t.iter().copied()).collect())
                .collect();
            Some(self.decode_tokens(p, mem, &batch.lengths, &inputs)?)
        } else {
            None
        };
        Ok(ForwardOutputs {
            f,
            p: p_rep,
            v: v_rep,
            fused,
            mem,
            phoneme_logits,
            viseme_logits,
            char_ctc_logits,
            char_attn_logits,
        })
    }

    /// Every branch this model has.
    pub fn full_activation(&self) -> ActivationConfig {
        ActivationConfig {
            use_phoneme: self.has_branch(BranchKind::Phoneme),
            use_viseme: self.has_branch(BranchKind::Viseme),
        }
    }

    /// CTC greedy char tokens for every sequence of a padded batch.
    pub fn greedy_batch(&self, batch: &Batch, act: ActivationConfig) -> Result<Vec<Vec<usize>>, ModelError> {
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &self.store);
        let out = self.forward(&p, batch, Fusion::Infer(act), false)?;
        let logits = out.char_ctc_logits.value();
        let (t, k) = (batch.max_frames(), self.cfg.char_classes());
        Ok(batch
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| {
                let rows = logits.data()[b * t * k..(b * t + len) * k].to_vec();
                ctc_greedy_decode(&Array::new(&[len, k], rows).expect("sized"))
            })
            .collect())
    }

    /// Decodes one `[T, C_in]` sequence with only the branches `act`
    /// enables.
    pub fn forward_infer(&self, features: &Array, act: ActivationConfig, method: DecodeMethod) -> Result<Hypothesis, ModelError> {
        if act.use_phoneme && !self.has_branch(BranchKind::Phoneme) {
            return Err(ModelError::MissingBranch(Group::Phoneme));
        }
        if act.use_viseme && !self.has_branch(BranchKind::Viseme) {
            return Err(ModelError::MissingBranch(Group::Viseme));
        }
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &self.store);
        let batch = Batch::single(features);
        let out = self.forward(&p, &batch, Fusion::Infer(act), false)?;
        let t = batch.lengths[0];
        let frames = |v: Option<Var<'_>>| -> Result<Option<Vec<usize>>, DiffError> {
            v.map(|l| {
                let k = l.shape()[2];
                Ok(frame_argmax(&l.value().reshaped(&[t, k])?))
            })
            .transpose()
        };
        let branch_frames = BranchFrames {
            phoneme: frames(out.phoneme_logits)?,
            viseme: frames(out.viseme_logits)?,
        };
        let kc = self.cfg.char_classes();
        let ctc = out.char_ctc_logits.value().reshaped(&[t, kc])?;
        let mut hyp = match method {
            DecodeMethod::CtcGreedy => {
                let tokens = ctc_greedy_decode(&ctc);
                Hypothesis::new(tokens, f64::NAN)
            }
            DecodeMethod::CtcBeam(w) => ctc_beam_decode(&ctc, w).into_iter().next().unwrap_or_else(|| Hypothesis::new(Vec::new(), 0.0)),
            DecodeMethod::Attention => {
                let step = AttentionStep {
                    model: self,
                    mem: out.mem.value(),
                    length: t,
                };
                attention_greedy_decode(&step, self.cfg.max_decode_len)?
            }
        };
        if matches!(method, DecodeMethod::CtcGreedy) {
            hyp.score = greedy_path_score(&ctc);
        }
        hyp.branch_frames = (act.use_phoneme || act.use_viseme).then_some(branch_frames);
        hyp.activation = Some(act);
        Ok(hyp)
    }
}

// Log-probability of the framewise argmax path.
fn greedy_path_score(logits: &Array) -> f64 {
    let k = logits.last_dim();
    let mut lp = vec![0.0; k];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            crate::diffcore::kernels::log_softmax_into(row, &mut lp);
            lp.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

struct AttentionStep<'m> {
    model: &'m Model,
    mem: Array,
    length: usize,
}

impl StepDecoder for AttentionStep<'_> {
    type Error = ModelError;

    fn end_token(&self) -> usize {
        self.model.cfg.eos()
    }

    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &self.model.store);
        let mem = tape.constant(self.mem.clone());
        let input: Vec<usize> = std::iter::once(self.model.cfg.eos()).chain(prefix.iter().copied()).collect();
        let n = input.len();
        let logits = self.model.decode_tokens(&p, mem, &[self.length], &[input])?.value();
        let k = logits.last_dim();
        Ok(logits.data()[(n - 1) * k..n * k].to_vec())
    }
}
