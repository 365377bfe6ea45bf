//! Building blocks recorded on a tape from a [`Bound`] parameter set.

use rand::Rng;

use super::params::{Bound, Group, ParamId, ParamStore};
use crate::diffcore::{Array, DiffError, Var, MASK_FILL};

type Res<'t> = Result<Var<'t>, DiffError>;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, d_in: usize, d_out: usize) -> Self {
        let w = store.add_weight(rng, format!("{name}.w"), group, &[d_in, d_out], 1.0 / (d_in as f64).sqrt());
        let b = store.add(format!("{name}.b"), group, Array::zeros(&[d_out]), true);
        Self { w, b }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Res<'t> {
        x.matmul(p.get(self.w))?.add_row(p.get(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, d: usize) -> Self {
        let g = store.add(format!("{name}.g"), group, Array::full(&[d], 1.0), true);
        let b = store.add(format!("{name}.b"), group, Array::zeros(&[d]), true);
        Self { g, b }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Res<'t> {
        x.layer_norm(p.get(self.g), p.get(self.b), LN_EPS)
    }
}

/// Pre-norm position-wise feed-forward: `W2 silu(W1 LN(x))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub ln: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, d: usize, hidden: usize) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), group, d),
            up: Linear::new(store, rng, &format!("{name}.up"), group, d, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), group, hidden, d),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Res<'t> {
        let h = self.up.forward(p, self.ln.forward(p, x)?)?.silu()?;
        self.down.forward(p, h)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), group, d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), group, d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), group, d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), group, d, d),
            heads,
        }
    }

    /// `query` is `[B, Tq, C]`, `memory` is `[B, Tk, C]`; `blocked` has
    /// `B * Tq * Tk` entries, true where a query may not look.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, query: Var<'t>, memory: Var<'t>, blocked: &[bool]) -> Res<'t> {
        let qs = query.shape();
        let ks = memory.shape();
        let (b, tq, c, tk) = (qs[0], qs[1], qs[2], ks[1]);
        let h = self.heads;
        let d = c / h;
        let split = |x: Var<'t>, t: usize| -> Res<'t> {
            x.reshape(&[b, t, h, d])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, t, d])
        };
        let q = split(self.q.forward(p, query)?, tq)?;
        let k = split(self.k.forward(p, memory)?, tk)?;
        let v = split(self.v.forward(p, memory)?, tk)?;
        let mut mask = Vec::with_capacity(b * h * tq * tk);
        for bi in 0..b {
            let rows = &blocked[bi * tq * tk..(bi + 1) * tq * tk];
            for _ in 0..h {
                mask.extend_from_slice(rows);
            }
        }
        let weights = q
            .bmm(k.transpose()?)?
            .scale(1.0 / (d as f64).sqrt())?
            .masked_fill(&mask, MASK_FILL)?
            .softmax()?;
        let ctx = weights
            .bmm(v)?
            .reshape(&[b, h, tq, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, tq, c])?;
        self.o.forward(p, ctx)
    }
}

/// Blocks keys at or beyond each sequence's length.
pub fn key_padding(lengths: &[usize], tq: usize, tk: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(lengths.len() * tq * tk);
    for &len in lengths {
        for _ in 0..tq {
            m.extend((0..tk).map(|j| j >= len));
        }
    }
    m
}

/// Key padding plus blocking of future positions.
pub fn causal_padding(lengths: &[usize], t: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(lengths.len() * t * t);
    for &len in lengths {
        for i in 0..t {
            m.extend((0..t).map(|j| j > i || j >= len));
        }
    }
    m
}

/// `[B, T, C]` constant that is 1 on valid frames and 0 on padding.
pub fn frame_mask(lengths: &[usize], t: usize, c: usize) -> Array {
    let mut data = Vec::with_capacity(lengths.len() * t * c);
    for &len in lengths {
        for ti in 0..t {
            data.extend(std::iter::repeat_n(if ti < len { 1.0 } else { 0.0 }, c));
        }
    }
    Array::new(&[lengths.len(), t, c], data).expect("sized")
}

pub fn zero_padding<'t>(x: Var<'t>, mask: &Array) -> Res<'t> {
    if mask.data().iter().all(|&m| m == 1.0) {
        return Ok(x);
    }
    x.mul(x.tape().constant(mask.clone()))
}

/// Pointwise GLU, depthwise temporal convolution, SiLU, pointwise.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub ln: LayerNorm,
    pub expand: Linear,
    pub depthwise: ParamId,
    pub project: Linear,
}

impl ConvModule {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, d: usize, kernel: usize) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), group, d),
            expand: Linear::new(store, rng, &format!("{name}.expand"), group, d, 2 * d),
            depthwise: store.add_weight(rng, format!("{name}.dw"), group, &[kernel, d], 1.0 / (kernel as f64).sqrt()),
            project: Linear::new(store, rng, &format!("{name}.project"), group, d, d),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>, mask: &Array) -> Res<'t> {
        let h = self.expand.forward(p, self.ln.forward(p, x)?)?.glu()?;
        let h = zero_padding(h, mask)?;
        let h = h.depthwise_conv1d(p.get(self.depthwise))?.silu()?;
        self.project.forward(p, h)
    }
}

/// Half-step feed-forward, self-attention, convolution, half-step
/// feed-forward, final norm.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    pub ff1: FeedForward,
    pub attn_ln: LayerNorm,
    pub attn: Attention,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub out_ln: LayerNorm,
}

impl ConformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        d: usize,
        hidden: usize,
        heads: usize,
        kernel: usize,
    ) -> Self {
        Self {
            ff1: FeedForward::new(store, rng, &format!("{name}.ff1"), group, d, hidden),
            attn_ln: LayerNorm::new(store, &format!("{name}.attn_ln"), group, d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), group, d, heads),
            conv: ConvModule::new(store, rng, &format!("{name}.conv"), group, d, kernel),
            ff2: FeedForward::new(store, rng, &format!("{name}.ff2"), group, d, hidden),
            out_ln: LayerNorm::new(store, &format!("{name}.out_ln"), group, d),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>, mask: &Array, blocked: &[bool]) -> Res<'t> {
        let x = x.add(self.ff1.forward(p, x)?.scale(0.5)?)?;
        let a = self.attn_ln.forward(p, x)?;
        let x = x.add(self.attn.forward(p, a, a, blocked)?)?;
        let x = x.add(self.conv.forward(p, x, mask)?)?;
        let x = x.add(self.ff2.forward(p, x)?.scale(0.5)?)?;
        zero_padding(self.out_ln.forward(p, x)?, mask)
    }
}

/// Causal self-attention, cross-attention into the encoder memory,
/// feed-forward (all pre-norm residual).
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_ln: LayerNorm,
    pub self_attn: Attention,
    pub cross_ln: LayerNorm,
    pub cross_attn: Attention,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, d: usize, hidden: usize, heads: usize) -> Self {
        Self {
            self_ln: LayerNorm::new(store, &format!("{name}.self_ln"), group, d),
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), group, d, heads),
            cross_ln: LayerNorm::new(store, &format!("{name}.cross_ln"), group, d),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), group, d, heads),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), group, d, hidden),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, y: Var<'t>, memory: Var<'t>, self_blocked: &[bool], cross_blocked: &[bool]) -> Res<'t> {
        let a = self.self_ln.forward(p, y)?;
        let y = y.add(self.self_attn.forward(p, a, a, self_blocked)?)?;
        let a = self.cross_ln.forward(p, y)?;
        let y = y.add(self.cross_attn.forward(p, a, memory, cross_blocked)?)?;
        y.add(self.ff.forward(p, y)?)
    }
}
