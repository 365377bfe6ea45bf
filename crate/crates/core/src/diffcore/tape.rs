use std::cell::{Ref, RefCell};

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{Array, DiffError};

/// Denominator floor for row-wise L2 normalization.
pub const L2_EPS: f64 = 1e-12;
/// Fill value used by `masked_fill` before a softmax.
pub const MASK_FILL: f64 = -1e30;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, g: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, batch: usize, r: usize, c: usize },
    Permute { x: usize, axes: Vec<usize> },
    Reshape(usize),
    Slice { x: usize, outer: usize, axis_len: usize, inner: usize, start: usize, len: usize },
    Concat { xs: Vec<(usize, usize)>, outer: usize, inner: usize, total: usize },
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sigmoid(usize),
    Silu(usize),
    Glu(usize),
    SumAll(usize),
    SumLast(usize),
    LogSumExpLast(usize),
    Softmax(usize),
    LogSoftmax(usize),
    L2Normalize { x: usize, norms: Vec<f64> },
    MaskedFill { x: usize, mask: Vec<bool> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    DepthwiseConv { x: usize, w: usize, b: usize, t: usize, c: usize, kernel: usize },
    Gather { table: usize, indices: Vec<usize> },
    SelectPerRow { x: usize, indices: Vec<usize> },
    Precomputed { x: usize, grad: Array },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            MatMul { a, b, .. } | Bmm { a, b, .. } => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Reshape(x) | Exp(x) | Log(x) | Relu(x) | Sigmoid(x)
            | Silu(x) | Glu(x) | SumAll(x) | SumLast(x) | LogSumExpLast(x) | Softmax(x)
            | LogSoftmax(x) => vec![*x],
            Transpose { x, .. }
            | Permute { x, .. }
            | Slice { x, .. }
            | L2Normalize { x, .. }
            | MaskedFill { x, .. }
            | SelectPerRow { x, .. }
            | Precomputed { x, .. } => vec![*x],
            Concat { xs, .. } => xs.iter().map(|(id, _)| *id).collect(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            DepthwiseConv { x, w, .. } => vec![*x, *w],
            Gather { table, .. } => vec![*table],
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// A tape is single-threaded; build a fresh one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

type Res<'t> = Result<Var<'t>, DiffError>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A non-differentiable input; gradients are never propagated into it.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&self, value: Array, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Array, op: Op, name: &'static str) -> Res<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        if !value.all_finite() {
            return Err(DiffError::NonFinite {
                op: name,
                node: self.len(),
            });
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Array> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Res<'t> {
        let first = xs
            .first()
            .ok_or_else(|| DiffError::InvalidArgument("concat of nothing".into()))?
            .shape();
        if axis >= first.len() {
            return Err(DiffError::InvalidArgument(format!("concat axis {axis} out of range")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut parts = Vec::with_capacity(xs.len());
        let mut total = 0;
        for x in xs {
            let s = x.shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: first.clone(),
                    right: s,
                });
            }
            parts.push((x.id, s[axis]));
            total += s[axis];
        }
        let mut data = vec![0.0; outer * total * inner];
        {
            let nodes = self.nodes.borrow();
            let mut offset = 0;
            for &(id, len) in &parts {
                let src = nodes[id].value.data();
                for o in 0..outer {
                    let dst = (o * total + offset) * inner;
                    data[dst..dst + len * inner]
                        .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
                }
                offset += len;
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        self.push(
            Array::new(&shape, data)?,
            Op::Concat {
                xs: parts,
                outer,
                inner,
                total,
            },
            "concat",
        )
    }

    /// Row lookup `table[indices[r], :]`, producing `[indices.len(), D]`.
    pub fn gather_rows<'t>(&'t self, table: Var<'t>, indices: &[usize]) -> Res<'t> {
        let shape = table.shape();
        if shape.len() != 2 {
            return Err(DiffError::InvalidArgument("gather_rows needs a 2-d table".into()));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(DiffError::InvalidArgument(format!("row {bad} out of range {rows}")));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        {
            let t = self.value(table.id);
            for &i in indices {
                data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
        }
        self.push(
            Array::new(&[indices.len(), d], data)?,
            Op::Gather {
                table: table.id,
                indices: indices.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Scalar node whose gradient with respect to `x` was computed by the
    /// caller (fused losses such as CTC).
    pub fn precomputed<'t>(&'t self, x: Var<'t>, value: f64, grad: Array) -> Res<'t> {
        if grad.shape() != x.shape().as_slice() {
            return Err(DiffError::ShapeMismatch {
                op: "precomputed",
                left: x.shape(),
                right: grad.shape().to_vec(),
            });
        }
        self.push(Array::scalar(value), Op::Precomputed { x: x.id, grad }, "precomputed")
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, DiffError> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(DiffError::NotScalar {
                shape: out.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Array>> = vec![None; nodes.len()];

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Array::new(node.value.shape(), g)?);
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| nodes[id].value.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(ga) = acc(nodes, grads, id) {
                    ga.iter_mut().zip(g).for_each(|(x, g)| *x += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, g)| *x += g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, g)| *x -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((x, g), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *x += g * bv;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for ((x, g), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *x += g * av;
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, g)| *x += g);
            }
            let n = nodes[*b].value.len();
            if let Some(gb) = acc(nodes, grads, *b) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(x, g)| *x += g);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, g)| *x += c * g);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, g)| *x += g);
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(nodes, grads, *a) {
                gemm_nt(g, bv, ga, *m, *n, *k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gemm_tn(av, g, gb, *k, *m, *n);
            }
        }
        Op::Bmm { a, b, g: groups, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            let (sa, sb, sc) = (m * k, k * n, m * n);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..*groups {
                    gemm_nt(&g[i * sc..(i + 1) * sc], &bv[i * sb..(i + 1) * sb], &mut ga[i * sa..(i + 1) * sa], *m, *n, *k);
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..*groups {
                    gemm_tn(&av[i * sa..(i + 1) * sa], &g[i * sc..(i + 1) * sc], &mut gb[i * sb..(i + 1) * sb], *k, *m, *n);
                }
            }
        }
        Op::Transpose { x, batch, r, c } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                // output is [batch, c, r]
                for bi in 0..*batch {
                    let base = bi * r * c;
                    for i in 0..*r {
                        for j in 0..*c {
                            gx[base + i * c + j] += g[base + j * r + i];
                        }
                    }
                }
            }
        }
        Op::Permute { x, axes } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                gx.iter_mut().zip(&back).for_each(|(x, g)| *x += g);
            }
        }
        Op::Slice { x, outer, axis_len, inner, start, len } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..*outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = (o * axis_len + start) * inner;
                    gx[dst..dst + len * inner].iter_mut().zip(src).for_each(|(x, g)| *x += g);
                }
            }
        }
        Op::Concat { xs, outer, inner, total } => {
            let mut offset = 0;
            for &(id, len) in xs {
                if let Some(gx) = acc(nodes, grads, id) {
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        gx[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                            .for_each(|(x, g)| *x += g);
                    }
                }
                offset += len;
            }
        }
        Op::Exp(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((d, g), y) in gx.iter_mut().zip(g).zip(y) {
                    *d += g * y;
                }
            }
        }
        Op::Log(x) => {
            let xv = val(*x);
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((d, g), xv) in gx.iter_mut().zip(g).zip(xv) {
                    *d += g / xv;
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((d, g), xv) in gx.iter_mut().zip(g).zip(xv) {
                    if *xv > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((d, g), y) in gx.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        Op::Silu(x) => {
            let xv = val(*x);
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((d, g), &xv) in gx.iter_mut().zip(g).zip(xv) {
                    let s = kernels::sigmoid(xv);
                    *d += g * s * (1.0 + xv * (1.0 - s));
                }
            }
        }
        Op::Glu(x) => {
            let xv = val(*x);
            let h = node.value.last_dim();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, grow) in g.chunks(h).enumerate() {
                    let base = r * 2 * h;
                    for (j, &gv) in grow.iter().enumerate() {
                        let a = xv[base + j];
                        let s = kernels::sigmoid(xv[base + h + j]);
                        gx[base + j] += gv * s;
                        gx[base + h + j] += gv * a * s * (1.0 - s);
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumLast(x) => {
            let d = nodes[*x].value.last_dim();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (row, gv) in gx.chunks_mut(d).zip(g) {
                    row.iter_mut().for_each(|v| *v += gv);
                }
            }
        }
        Op::LogSumExpLast(x) => {
            let d = nodes[*x].value.last_dim();
            let xv = val(*x);
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, (row, gv)) in gx.chunks_mut(d).zip(g).enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v += gv * (xv[r * d + j] - y[r]).exp();
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let d = node.value.last_dim();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((grow, yrow), dst) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dst[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let d = node.value.last_dim();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((grow, yrow), dst) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let total: f64 = grow.iter().sum();
                    for j in 0..d {
                        dst[j] += grow[j] - yrow[j].exp() * total;
                    }
                }
            }
        }
        Op::L2Normalize { x, norms } => {
            let d = node.value.last_dim();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, &norm) in norms.iter().enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    let yrow = &y[r * d..(r + 1) * d];
                    let dst = &mut gx[r * d..(r + 1) * d];
                    if norm > L2_EPS {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[j] += (grow[j] - yrow[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..d {
                            dst[j] += grow[j] / L2_EPS;
                        }
                    }
                }
            }
        }
        Op::MaskedFill { x, mask } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((d, g), &m) in gx.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *d += g;
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = node.value.last_dim();
            let gam = val(*gamma);
            if let Some(gg) = acc(nodes, grads, *gamma) {
                for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += grow[j] * xrow[j];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *beta) {
                for grow in g.chunks(d) {
                    gb.iter_mut().zip(grow).for_each(|(b, g)| *b += g);
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let inv_d = 1.0 / d as f64;
                for (r, &istd) in inv_std.iter().enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    let xrow = &xhat[r * d..(r + 1) * d];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for j in 0..d {
                        let gh = grow[j] * gam[j];
                        sum_g += gh;
                        sum_gx += gh * xrow[j];
                    }
                    let dst = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let gh = grow[j] * gam[j];
                        dst[j] += istd * (gh - inv_d * sum_g - xrow[j] * inv_d * sum_gx);
                    }
                }
            }
        }
        Op::DepthwiseConv { x, w, b, t, c, kernel } => {
            let (xv, wv) = (val(*x), val(*w));
            let pad = kernel / 2;
            if let Some(gx) = acc(nodes, grads, *x) {
                conv_accumulate(g, wv, gx, *b, *t, *c, *kernel, pad, true);
            }
            if let Some(gw) = acc(nodes, grads, *w) {
                for bi in 0..*b {
                    for ti in 0..*t {
                        let orow = &g[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                        for k in 0..*kernel {
                            let src = ti as isize + k as isize - pad as isize;
                            if src < 0 || src >= *t as isize {
                                continue;
                            }
                            let xrow = &xv[(bi * t + src as usize) * c..(bi * t + src as usize + 1) * c];
                            let wrow = &mut gw[k * c..(k + 1) * c];
                            for ch in 0..*c {
                                wrow[ch] += orow[ch] * xrow[ch];
                            }
                        }
                    }
                }
            }
        }
        Op::Gather { table, indices } => {
            let d = node.value.last_dim();
            if let Some(gt) = acc(nodes, grads, *table) {
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::SelectPerRow { x, indices } => {
            let d = nodes[*x].value.last_dim();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, &i) in indices.iter().enumerate() {
                    gx[r * d + i] += g[r];
                }
            }
        }
        Op::Precomputed { x, grad } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (d, v) in gx.iter_mut().zip(grad.data()) {
                    *d += g[0] * v;
                }
            }
        }
    }
}

/// Forward (`transpose_kernel = false`, `src` = input, `dst` = output) or
/// input-gradient (`true`, `src` = output grad, `dst` = input grad)
/// pass of a same-padded depthwise temporal convolution.
#[allow(clippy::too_many_arguments)]
fn conv_accumulate(
    src: &[f64],
    w: &[f64],
    dst: &mut [f64],
    b: usize,
    t: usize,
    c: usize,
    kernel: usize,
    pad: usize,
    transpose_kernel: bool,
) {
    for bi in 0..b {
        for ti in 0..t {
            for k in 0..kernel {
                let other = ti as isize + k as isize - pad as isize;
                if other < 0 || other >= t as isize {
                    continue;
                }
                let other = other as usize;
                let wrow = &w[k * c..(k + 1) * c];
                let (from, to) = if transpose_kernel { (ti, other) } else { (other, ti) };
                let srow = &src[(bi * t + from) * c..(bi * t + from + 1) * c];
                let drow = &mut dst[(bi * t + to) * c..(bi * t + to + 1) * c];
                for ch in 0..c {
                    drow[ch] += wrow[ch] * srow[ch];
                }
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < new_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, new_shape)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Array {
        self.tape.value(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Array) -> R) -> R {
        f(&self.tape.value(self.id))
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<(), DiffError> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(DiffError::ShapeMismatch { op, left: a, right: b });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Var<'t>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Res<'t> {
        self.same_shape(other, name)?;
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Array::new(a.shape(), data)?
        };
        self.tape.push(value, op, name)
    }

    fn unary(&self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Res<'t> {
        let value = self.tape.value(self.id).map(f);
        self.tape.push(value, op, name)
    }

    pub fn add(&self, other: Var<'t>) -> Res<'t> {
        self.zip_with(&other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Res<'t> {
        self.zip_with(&other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Res<'t> {
        self.zip_with(&other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    /// Adds a vector of length `last_dim` to every row.
    pub fn add_row(&self, bias: Var<'t>) -> Res<'t> {
        let (shape, bshape) = (self.shape(), bias.shape());
        if bshape.len() != 1 || shape.last() != bshape.first() {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                left: shape,
                right: bshape,
            });
        }
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(bias.id);
            let n = b.len();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
            }
            Array::new(a.shape(), data)?
        };
        self.tape.push(value, Op::AddRow(self.id, bias.id), "add_row")
    }

    pub fn scale(&self, c: f64) -> Res<'t> {
        self.unary(Op::Scale(self.id, c), "scale", |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Res<'t> {
        self.unary(Op::AddScalar(self.id), "add_scalar", |x| x + c)
    }

    /// `[.., k] x [k, n] -> [.., n]`, treating leading axes as rows.
    pub fn matmul(&self, rhs: Var<'t>) -> Res<'t> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.is_empty() || rs.len() != 2 || ls[ls.len() - 1] != rs[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: ls,
                right: rs,
            });
        }
        let (k, n) = (rs[0], rs[1]);
        let m: usize = ls[..ls.len() - 1].iter().product();
        let mut data = vec![0.0; m * n];
        {
            let a = self.tape.value(self.id);
            let b = self.tape.value(rhs.id);
            gemm_nn(a.data(), b.data(), &mut data, m, k, n);
        }
        let mut shape = ls.clone();
        *shape.last_mut().unwrap() = n;
        self.tape.push(
            Array::new(&shape, data)?,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
            "matmul",
        )
    }

    /// Batched product `[g, m, k] x [g, k, n] -> [g, m, n]`.
    pub fn bmm(&self, rhs: Var<'t>) -> Res<'t> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 3 || rs.len() != 3 || ls[0] != rs[0] || ls[2] != rs[1] {
            return Err(DiffError::ShapeMismatch {
                op: "bmm",
                left: ls,
                right: rs,
            });
        }
        let (g, m, k, n) = (ls[0], ls[1], ls[2], rs[2]);
        let mut data = vec![0.0; g * m * n];
        {
            let a = self.tape.value(self.id);
            let b = self.tape.value(rhs.id);
            for i in 0..g {
                gemm_nn(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut data[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.tape.push(
            Array::new(&[g, m, n], data)?,
            Op::Bmm {
                a: self.id,
                b: rhs.id,
                g,
                m,
                k,
                n,
            },
            "bmm",
        )
    }

    /// Swaps the last two axes (rank 2 or 3).
    pub fn transpose(&self) -> Res<'t> {
        let shape = self.shape();
        let (batch, r, c) = match shape.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => {
                return Err(DiffError::InvalidArgument(format!(
                    "transpose needs rank 2 or 3, got {shape:?}"
                )))
            }
        };
        let mut data = vec![0.0; batch * r * c];
        {
            let a = self.tape.value(self.id);
            let src = a.data();
            for bi in 0..batch {
                let base = bi * r * c;
                for i in 0..r {
                    for j in 0..c {
                        data[base + j * r + i] = src[base + i * c + j];
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        let n = out_shape.len();
        out_shape.swap(n - 1, n - 2);
        self.tape.push(
            Array::new(&out_shape, data)?,
            Op::Transpose {
                x: self.id,
                batch,
                r,
                c,
            },
            "transpose",
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Res<'t> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(DiffError::InvalidArgument(format!(
                "invalid permutation {axes:?} for {shape:?}"
            )));
        }
        let (data, new_shape) = permute_data(self.tape.value(self.id).data(), &shape, axes);
        self.tape.push(
            Array::new(&new_shape, data)?,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
            "permute",
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Res<'t> {
        let value = self.value().reshaped(shape)?;
        self.tape.push(value, Op::Reshape(self.id), "reshape")
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Res<'t> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(DiffError::InvalidArgument(format!(
                "slice axis {axis} [{start}, {}) out of range for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let a = self.tape.value(self.id);
            for o in 0..outer {
                let from = (o * axis_len + start) * inner;
                data.extend_from_slice(&a.data()[from..from + len * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.tape.push(
            Array::new(&out_shape, data)?,
            Op::Slice {
                x: self.id,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
            "slice",
        )
    }

    pub fn exp(&self) -> Res<'t> {
        self.unary(Op::Exp(self.id), "exp", f64::exp)
    }

    pub fn log(&self) -> Res<'t> {
        self.unary(Op::Log(self.id), "log", f64::ln)
    }

    pub fn relu(&self) -> Res<'t> {
        self.unary(Op::Relu(self.id), "relu", |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Res<'t> {
        self.unary(Op::Sigmoid(self.id), "sigmoid", kernels::sigmoid)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Res<'t> {
        self.unary(Op::Silu(self.id), "silu", |x| x * kernels::sigmoid(x))
    }

    /// Gated linear unit over the last axis: `a * sigmoid(b)` where
    /// `[a, b]` are its two halves.
    pub fn glu(&self) -> Res<'t> {
        let shape = self.shape();
        let d = *shape.last().unwrap_or(&0);
        if d % 2 != 0 {
            return Err(DiffError::InvalidArgument("glu needs an even last axis".into()));
        }
        let h = d / 2;
        let mut data = Vec::new();
        {
            let a = self.tape.value(self.id);
            for row in a.data().chunks(d) {
                for j in 0..h {
                    data.push(row[j] * kernels::sigmoid(row[h + j]));
                }
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = h;
        self.tape.push(Array::new(&out_shape, data)?, Op::Glu(self.id), "glu")
    }

    pub fn sum(&self) -> Res<'t> {
        let s: f64 = self.tape.value(self.id).data().iter().sum();
        self.tape.push(Array::scalar(s), Op::SumAll(self.id), "sum")
    }

    pub fn mean(&self) -> Res<'t> {
        let n = self.tape.value(self.id).len().max(1);
        self.sum()?.scale(1.0 / n as f64)
    }

    fn reduce_last(&self, op: Op, name: &'static str, f: impl Fn(&[f64]) -> f64) -> Res<'t> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(DiffError::InvalidArgument(format!("{name} needs rank >= 1")));
        }
        let data: Vec<f64> = {
            let a = self.tape.value(self.id);
            a.data().chunks(a.last_dim()).map(f).collect()
        };
        self.tape.push(Array::new(&shape[..shape.len() - 1], data)?, op, name)
    }

    /// Sum over the last axis.
    pub fn sum_last(&self) -> Res<'t> {
        self.reduce_last(Op::SumLast(self.id), "reduce_sum", |r| r.iter().sum())
    }

    /// `log(sum(exp(.)))` over the last axis.
    pub fn logsumexp_last(&self) -> Res<'t> {
        self.reduce_last(Op::LogSumExpLast(self.id), "reduce_logsumexp", kernels::logsumexp)
    }

    fn rowwise(&self, op: Op, name: &'static str, f: impl Fn(&[f64], &mut [f64])) -> Res<'t> {
        let value = {
            let a = self.tape.value(self.id);
            let d = a.last_dim();
            let mut data = vec![0.0; a.len()];
            for (src, dst) in a.data().chunks(d).zip(data.chunks_mut(d)) {
                f(src, dst);
            }
            Array::new(a.shape(), data)?
        };
        self.tape.push(value, op, name)
    }

    pub fn softmax(&self) -> Res<'t> {
        self.rowwise(Op::Softmax(self.id), "softmax", kernels::softmax_into)
    }

    pub fn log_softmax(&self) -> Res<'t> {
        self.rowwise(Op::LogSoftmax(self.id), "log_softmax", kernels::log_softmax_into)
    }

    /// Divides each row by `max(||row||, 1e-12)`.
    pub fn l2_normalize(&self) -> Res<'t> {
        let (value, norms) = {
            let a = self.tape.value(self.id);
            let d = a.last_dim();
            let mut data = vec![0.0; a.len()];
            let mut norms = Vec::with_capacity(a.rows());
            for (src, dst) in a.data().chunks(d).zip(data.chunks_mut(d)) {
                let norm = src.iter().map(|x| x * x).sum::<f64>().sqrt();
                let denom = norm.max(L2_EPS);
                for (o, x) in dst.iter_mut().zip(src) {
                    *o = x / denom;
                }
                norms.push(norm);
            }
            (Array::new(a.shape(), data)?, norms)
        };
        self.tape.push(value, Op::L2Normalize { x: self.id, norms }, "l2_normalize")
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Res<'t> {
        let out = {
            let a = self.tape.value(self.id);
            if mask.len() != a.len() {
                return Err(DiffError::ShapeMismatch {
                    op: "masked_fill",
                    left: a.shape().to_vec(),
                    right: vec![mask.len()],
                });
            }
            let data = a
                .data()
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { value } else { x })
                .collect();
            Array::new(a.shape(), data)?
        };
        self.tape.push(
            out,
            Op::MaskedFill {
                x: self.id,
                mask: mask.to_vec(),
            },
            "masked_fill",
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Res<'t> {
        let d = self.shape().last().copied().unwrap_or(0);
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(DiffError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(),
                right: gamma.shape(),
            });
        }
        let (value, xhat, inv_std) = {
            let a = self.tape.value(self.id);
            let g = self.tape.value(gamma.id);
            let b = self.tape.value(beta.id);
            let mut out = vec![0.0; a.len()];
            let mut xhat = vec![0.0; a.len()];
            let mut inv_std = Vec::with_capacity(a.rows());
            for (r, row) in a.data().chunks(d).enumerate() {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let istd = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    let h = (row[j] - mean) * istd;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g.data()[j] + b.data()[j];
                }
                inv_std.push(istd);
            }
            (Array::new(a.shape(), out)?, xhat, inv_std)
        };
        self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Same-padded depthwise convolution over time: `x` is `[B, T, C]`,
    /// `w` is `[K, C]` with odd `K`.
    pub fn depthwise_conv1d(&self, w: Var<'t>) -> Res<'t> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 2 || xs[2] != ws[1] || ws[0] % 2 == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "depthwise_conv1d",
                left: xs,
                right: ws,
            });
        }
        let (b, t, c, kernel) = (xs[0], xs[1], xs[2], ws[0]);
        let mut data = vec![0.0; b * t * c];
        {
            let xv = self.tape.value(self.id);
            let wv = self.tape.value(w.id);
            conv_accumulate(xv.data(), wv.data(), &mut data, b, t, c, kernel, kernel / 2, false);
        }
        self.tape.push(
            Array::new(&xs, data)?,
            Op::DepthwiseConv {
                x: self.id,
                w: w.id,
                b,
                t,
                c,
                kernel,
            },
            "depthwise_conv1d",
        )
    }

    /// `x[r, indices[r]]` for a `[R, K]` input, producing `[R]`.
    pub fn select_per_row(&self, indices: &[usize]) -> Res<'t> {
        let data = {
            let a = self.tape.value(self.id);
            let d = a.last_dim();
            if a.rows() != indices.len() {
                return Err(DiffError::ShapeMismatch {
                    op: "select_per_row",
                    left: a.shape().to_vec(),
                    right: vec![indices.len()],
                });
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
                return Err(DiffError::InvalidArgument(format!("index {bad} out of range {d}")));
            }
            indices
                .iter()
                .enumerate()
                .map(|(r, &i)| a.data()[r * d + i])
                .collect()
        };
        self.tape.push(
            Array::from_vec(data),
            Op::SelectPerRow {
                x: self.id,
                indices: indices.to_vec(),
            },
            "select_per_row",
        )
    }
}

/// Gradients of leaf nodes from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient for `leaf`; all zeros when the leaf does not reach the output.
    pub fn get(&self, leaf: Var<'_>) -> Array {
        match self.grads.get(leaf.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array::zeros(&leaf.shape()),
        }
    }

    pub fn take(&mut self, leaf: Var<'_>) -> Array {
        match self.grads.get_mut(leaf.id).and_then(|g| g.take()) {
            Some(g) => g,
            None => Array::zeros(&leaf.shape()),
        }
    }
}
