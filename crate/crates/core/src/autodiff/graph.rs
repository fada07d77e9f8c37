use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, strides, Tensor};
use crate::error::{ensure, Error, Result};
use crate::lombscargle::{feature_derivative, feature_value, FeatureOptions};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A differentiable operation defined outside the built-in set.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradients with respect to each input, `None` where not needed.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Gelu,
    Relu,
    Sigmoid,
    Tanh,
    Log1p,
    Square,
    /// Weighted log-compression of periodogram power.
    FapLog { j_eff: f64, opts: FeatureOptions },
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    ExpandAxis { x: Var, axis: usize, n: usize },
    Matmul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    SoftmaxLast(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Unary(Var, Unary),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    GatherRows { table: Var, idx: Vec<usize> },
    MaskedFill { x: Var, mask: Vec<bool> },
    MaskedMse { a: Var, b: Var, weights: Vec<f64>, denom: f64 },
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, start: usize, len: usize },
    Im2colTime { x: Var, kernel: usize },
    StandardizeLast { x: Var, inv_std: Vec<f64> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations supporting one reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_of: HashMap<usize, ParamId>,
    frozen: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter of `store`, zeros where unused.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(&p.value.shape)).collect();
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[pid.0].add_assign(g);
            }
        }
        out
    }
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Gelu => gelu(x).0,
        Unary::Relu => x.max(0.0),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Log1p => x.ln_1p(),
        Unary::Square => x * x,
        Unary::FapLog { j_eff, opts } => feature_value(x, j_eff, &opts),
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Gelu => gelu(x).1,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Log1p => 1.0 / (1.0 + x),
        Unary::Square => 2.0 * x,
        Unary::FapLog { j_eff, opts } => {
            if x < 0.0 {
                0.0
            } else {
                feature_derivative(x, j_eff, &opts)
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let rank = out_shape.len();
    if rank == 0 {
        return (data.to_vec(), out_shape);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| data[base + i * inner_stride]));
        }
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in dst.iter_mut() {
            *o /= s;
        }
    }
    out
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters are recorded as constants (inference only).
    pub fn frozen() -> Self {
        Self { frozen: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|&p| self.rg(p));
        self.push(value, op, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Leaf, !self.frozen);
        self.params.insert(id, v);
        self.param_of.insert(v.0, id);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            Shape,
            "{what}: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push_op(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = Tensor { shape: self.shape(a).to_vec(), data: self.value(a).data.iter().map(|x| x * c).collect() };
        self.push_op(t, Op::Scale(a, c), &[a])
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(suffix_of(self.shape(b), self.shape(a)), Shape, "add_bcast: {:?} onto {:?}", self.shape(b), self.shape(a));
        let bv = &self.value(b).data;
        let nb = bv.len();
        let data = self.value(a).data.iter().enumerate().map(|(i, x)| x + bv[i % nb]).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push_op(t, Op::AddBcast(a, b), &[a, b]))
    }

    /// `a * b` with `b` broadcast over the leading axes of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(suffix_of(self.shape(b), self.shape(a)), Shape, "mul_bcast: {:?} onto {:?}", self.shape(b), self.shape(a));
        let bv = &self.value(b).data;
        let nb = bv.len();
        let data = self.value(a).data.iter().enumerate().map(|(i, x)| x * bv[i % nb]).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push_op(t, Op::MulBcast(a, b), &[a, b]))
    }

    /// Inserts a new axis of size `n` at `axis`, repeating the input.
    pub fn expand_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(axis <= shape.len(), Shape, "expand_axis: axis {axis} for rank {}", shape.len());
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let chunk = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(chunk);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, n);
        Ok(self.push_op(Tensor { shape: out_shape, data }, Op::ExpandAxis { x, axis, n }, &[x]))
    }

    /// `x [.., k] · w [k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        ensure!(ws.len() == 2 && !xs.is_empty() && xs[xs.len() - 1] == ws[0], Shape, "matmul: {xs:?} · {ws:?}");
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).len() / k.max(1);
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, &self.value(x).data, (k, 1), &self.value(w).data, (n, 1), &mut data, false);
        Ok(self.push_op(Tensor { shape: out_shape, data }, Op::Matmul(x, w), &[x, w]))
    }

    /// Batched `a [G, m, k] · b [G, k, n]`, or `· bᵀ` with `b [G, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(as_.len() == 3 && bs.len() == 3 && as_[0] == bs[0], Shape, "bmm: {as_:?} · {bs:?}");
        let (g, m, k) = (as_[0], as_[1], as_[2]);
        let (kb, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        ensure!(k == kb, Shape, "bmm inner dims: {as_:?} · {bs:?} (trans_b = {trans_b})");
        let mut data = vec![0.0; g * m * n];
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let bstr = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bv[i * k * n..(i + 1) * k * n],
                bstr,
                &mut data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.push_op(Tensor { shape: vec![g, m, n], data }, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = softmax_rows(&t.data, t.last_dim());
        let t = Tensor { shape: t.shape.clone(), data };
        self.push_op(t, Op::SoftmaxLast(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        ensure!(
            self.shape(gamma) == [d] && self.shape(beta) == [d],
            Shape,
            "layernorm affine shape {:?} for width {d}",
            self.shape(gamma)
        );
        let xv = &self.value(x).data;
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let src = &xv[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (src[i] - mean) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gv[i] + bv[i];
            }
        }
        let t = Tensor { shape: self.shape(x).to_vec(), data: out };
        Ok(self.push_op(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| unary_forward(kind, v)).collect();
        let t = Tensor { shape: t.shape.clone(), data };
        self.push_op(t, Op::Unary(x, kind), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        ensure!(n == self.value(x).len(), Shape, "reshape {:?} to {shape:?}", self.shape(x));
        let t = Tensor { shape: shape.to_vec(), data: self.value(x).data.clone() };
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        ensure!(axes.len() == shape.len(), Shape, "permute {axes:?} for rank {}", shape.len());
        for &a in axes {
            ensure!(a < shape.len() && !seen[a], Shape, "permute: bad axes {axes:?}");
            seen[a] = true;
        }
        let (data, out_shape) = permute_data(&self.value(x).data, &shape, axes);
        Ok(self.push_op(Tensor { shape: out_shape, data }, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Rows of a `[V, d]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        ensure!(ts.len() == 2, Shape, "gather_rows needs a matrix, got {ts:?}");
        let (v, d) = (ts[0], ts[1]);
        ensure!(idx.iter().all(|&i| i < v), Shape, "gather_rows index out of range {v}");
        let src = &self.value(table).data;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor { shape: vec![idx.len(), d], data };
        Ok(self.push_op(t, Op::GatherRows { table, idx: idx.to_vec() }, &[table]))
    }

    /// Replaces entries where `mask` is set with `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        ensure!(mask.len() == self.value(x).len(), Shape, "masked_fill mask length");
        let data = self.value(x).data.iter().zip(mask).map(|(&v, &m)| if m { value } else { v }).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        Ok(self.push_op(t, Op::MaskedFill { x, mask: mask.to_vec() }, &[x]))
    }

    /// `Σ w (a − b)² / max(Σ w, 1)`.
    pub fn masked_mse(&mut self, a: Var, b: Var, weights: &[f64]) -> Result<Var> {
        self.same_shape(a, b, "masked_mse")?;
        ensure!(weights.len() == self.value(a).len(), Shape, "masked_mse weight length");
        let denom = weights.iter().sum::<f64>().max(1.0);
        let s: f64 = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .zip(weights)
            .map(|((x, y), w)| w * (x - y) * (x - y))
            .sum();
        let op = Op::MaskedMse { a, b, weights: weights.to_vec(), denom };
        Ok(self.push_op(Tensor::scalar(s / denom), op, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(axis < shape.len(), Shape, "mean_axis {axis} for rank {}", shape.len());
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.value(x).data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..n {
                let base = (o * n + r) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push_op(Tensor { shape: out_shape, data }, Op::MeanAxis { x, axis }, &[x]))
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        ensure!(!xs.is_empty(), Shape, "concat of nothing");
        let lead = &self.shape(xs[0])[..self.shape(xs[0]).len() - 1];
        for &x in xs {
            let s = self.shape(x);
            ensure!(!s.is_empty() && s[..s.len() - 1] == *lead, Shape, "concat_last: {s:?} vs leading {lead:?}");
        }
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push_op(Tensor { shape, data }, Op::ConcatLast(xs.to_vec()), xs))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.value(x).last_dim();
        ensure!(start + len <= d, Shape, "slice_last {start}+{len} of {d}");
        let data = self.value(x).data.chunks(d).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push_op(Tensor { shape, data }, Op::SliceLast { x, start, len }, &[x]))
    }

    /// `[N, L, C] → [N, L, kernel·C]` windows along time, zero padded.
    pub fn im2col_time(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 3 && kernel % 2 == 1, Shape, "im2col_time: shape {s:?}, kernel {kernel}");
        let (n, l, c) = (s[0], s[1], s[2]);
        let pad = kernel / 2;
        let src = &self.value(x).data;
        let mut data = vec![0.0; n * l * kernel * c];
        for b in 0..n {
            for t in 0..l {
                let dst = (b * l + t) * kernel * c;
                for j in 0..kernel {
                    let tt = t + j;
                    if tt < pad || tt - pad >= l {
                        continue;
                    }
                    let from = (b * l + tt - pad) * c;
                    data[dst + j * c..dst + (j + 1) * c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
        let t = Tensor { shape: vec![n, l, kernel * c], data };
        Ok(self.push_op(t, Op::Im2colTime { x, kernel }, &[x]))
    }

    /// Zero-mean, unit (population) variance over the last axis; flat rows map to zeros.
    pub fn standardize_last(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let (data, stds) = crate::lombscargle::standardize_rows(&self.value(x).data, d);
        let inv_std = stds.iter().map(|&s| if s > 0.0 { 1.0 / s } else { 0.0 }).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push_op(t, Op::StandardizeLast { x, inv_std }, &[x])
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals)?;
        Ok(self.push_op(out, Op::Custom { inputs: inputs.to_vec(), op }, inputs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        ensure!(self.value(loss).len() == 1, Shape, "backward needs a scalar, got {:?}", self.shape(loss));
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor { shape: self.shape(loss).to_vec(), data: vec![1.0] });
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self.param_of.iter().map(|(&node, &pid)| (pid, node)).collect();
        Ok(Grads { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, f: &dyn Fn() -> Tensor| {
            if self.rg(v) {
                let t = f();
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor { shape: self.shape(v).to_vec(), data };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|| g.clone());
                acc(*b, &|| g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, &|| g.clone());
                acc(*b, &|| like(*b, g.data.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &|| like(*a, g.data.iter().zip(bv).map(|(x, y)| x * y).collect()));
                acc(*b, &|| like(*b, g.data.iter().zip(av).map(|(x, y)| x * y).collect()));
            }
            Op::Scale(a, c) => acc(*a, &|| like(*a, g.data.iter().map(|v| v * c).collect())),
            Op::AddBcast(a, b) => {
                acc(*a, &|| g.clone());
                acc(*b, &|| {
                    let nb = self.value(*b).len();
                    let mut d = vec![0.0; nb];
                    for (j, v) in g.data.iter().enumerate() {
                        d[j % nb] += v;
                    }
                    like(*b, d)
                });
            }
            Op::MulBcast(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let nb = bv.len();
                acc(*a, &|| like(*a, g.data.iter().enumerate().map(|(j, v)| v * bv[j % nb]).collect()));
                acc(*b, &|| {
                    let mut d = vec![0.0; nb];
                    for (j, (v, x)) in g.data.iter().zip(av).enumerate() {
                        d[j % nb] += v * x;
                    }
                    like(*b, d)
                });
            }
            Op::ExpandAxis { x, axis, n } => acc(*x, &|| {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                let mut d = vec![0.0; outer * inner];
                for o in 0..outer {
                    for r in 0..*n {
                        let src = &g.data[(o * n + r) * inner..(o * n + r + 1) * inner];
                        for (t, s) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *t += s;
                        }
                    }
                }
                like(*x, d)
            }),
            Op::Matmul(x, w) => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let xv = &self.value(*x).data;
                let m = xv.len() / k.max(1);
                acc(*x, &|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, (n, 1), &self.value(*w).data, (1, n), &mut d, false);
                    like(*x, d)
                });
                acc(*w, &|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, xv, (1, k), &g.data, (n, 1), &mut d, false);
                    like(*w, d)
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let as_ = self.shape(*a);
                let (gn, m, k) = (as_[0], as_[1], as_[2]);
                let n = y.shape[2];
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &|| {
                    // dA = dC · op(B)ᵀ
                    let mut d = vec![0.0; gn * m * k];
                    let bstr = if *trans_b { (k, 1) } else { (1, n) };
                    for i in 0..gn {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &bv[i * k * n..(i + 1) * k * n],
                            bstr,
                            &mut d[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    like(*a, d)
                });
                acc(*b, &|| {
                    let mut d = vec![0.0; gn * k * n];
                    for i in 0..gn {
                        let ga = &g.data[i * m * n..(i + 1) * m * n];
                        let aa = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut d[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB [n, k] = dCᵀ · A
                            gemm(n, m, k, ga, (1, n), aa, (k, 1), out, false);
                        } else {
                            // dB [k, n] = Aᵀ · dC
                            gemm(k, m, n, aa, (1, k), ga, (n, 1), out, false);
                        }
                    }
                    like(*b, d)
                });
            }
            Op::SoftmaxLast(x) => acc(*x, &|| {
                let d = y.last_dim();
                let mut out = vec![0.0; y.len()];
                for ((yr, gr), o) in y.data.chunks(d).zip(g.data.chunks(d)).zip(out.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((oo, &yy), &gg) in o.iter_mut().zip(yr).zip(gr) {
                        *oo = yy * (gg - dot);
                    }
                }
                like(*x, out)
            }),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = y.last_dim();
                let gv = &self.value(*gamma).data;
                acc(*x, &|| {
                    let mut out = vec![0.0; y.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g.data[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..d {
                            let dh = gr[i] * gv[i];
                            m1 += dh;
                            m2 += dh * hr[i];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for i in 0..d {
                            out[r * d + i] = is * (gr[i] * gv[i] - m1 - hr[i] * m2);
                        }
                    }
                    like(*x, out)
                });
                acc(*gamma, &|| {
                    let mut out = vec![0.0; d];
                    for (j, (gg, h)) in g.data.iter().zip(xhat).enumerate() {
                        out[j % d] += gg * h;
                    }
                    like(*gamma, out)
                });
                acc(*beta, &|| {
                    let mut out = vec![0.0; d];
                    for (j, gg) in g.data.iter().enumerate() {
                        out[j % d] += gg;
                    }
                    like(*beta, out)
                });
            }
            Op::Unary(x, kind) => {
                let xv = &self.value(*x).data;
                acc(*x, &|| {
                    like(
                        *x,
                        g.data.iter().zip(xv).zip(&y.data).map(|((gg, &xx), &yy)| gg * unary_derivative(*kind, xx, yy)).collect(),
                    )
                });
            }
            Op::Reshape(x) => acc(*x, &|| like(*x, g.data.clone())),
            Op::Permute { x, axes } => acc(*x, &|| {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (d, _) = permute_data(&g.data, &y.shape, &inv);
                like(*x, d)
            }),
            Op::GatherRows { table, idx } => acc(*table, &|| {
                let d = y.last_dim();
                let mut out = vec![0.0; self.value(*table).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        out[i * d + c] += g.data[r * d + c];
                    }
                }
                like(*table, out)
            }),
            Op::MaskedFill { x, mask } => {
                acc(*x, &|| like(*x, g.data.iter().zip(mask).map(|(&v, &m)| if m { 0.0 } else { v }).collect()))
            }
            Op::MaskedMse { a, b, weights, denom } => {
                let s = g.item() * 2.0 / denom;
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let diff: Vec<f64> = av.iter().zip(bv).zip(weights).map(|((x, y), w)| s * w * (x - y)).collect();
                acc(*a, &|| like(*a, diff.clone()));
                acc(*b, &|| like(*b, diff.iter().map(|v| -v).collect()));
            }
            Op::Sum(x) => acc(*x, &|| Tensor::full(self.shape(*x), g.item())),
            Op::Mean(x) => acc(*x, &|| {
                let n = self.value(*x).len().max(1) as f64;
                Tensor::full(self.shape(*x), g.item() / n)
            }),
            Op::MeanAxis { x, axis } => acc(*x, &|| {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut out = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for r in 0..n {
                        for i in 0..inner {
                            out[(o * n + r) * inner + i] = g.data[o * inner + i] / n as f64;
                        }
                    }
                }
                like(*x, out)
            }),
            Op::ConcatLast(xs) => {
                let total = y.last_dim();
                let rows = y.len() / total.max(1);
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).last_dim();
                    acc(x, &|| {
                        let mut out = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            out.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                        }
                        like(x, out)
                    });
                    offset += w;
                }
            }
            Op::SliceLast { x, start, len } => acc(*x, &|| {
                let d = self.value(*x).last_dim();
                let mut out = vec![0.0; self.value(*x).len()];
                for (row, gr) in out.chunks_mut(d).zip(g.data.chunks(*len)) {
                    row[*start..*start + *len].copy_from_slice(gr);
                }
                like(*x, out)
            }),
            Op::Im2colTime { x, kernel } => acc(*x, &|| {
                let s = self.shape(*x);
                let (n, l, c) = (s[0], s[1], s[2]);
                let pad = kernel / 2;
                let mut out = vec![0.0; n * l * c];
                for b in 0..n {
                    for t in 0..l {
                        let src = (b * l + t) * kernel * c;
                        for j in 0..*kernel {
                            let tt = t + j;
                            if tt < pad || tt - pad >= l {
                                continue;
                            }
                            let to = (b * l + tt - pad) * c;
                            for ch in 0..c {
                                out[to + ch] += g.data[src + j * c + ch];
                            }
                        }
                    }
                }
                like(*x, out)
            }),
            Op::StandardizeLast { x, inv_std } => acc(*x, &|| {
                let d = y.last_dim();
                let mut out = vec![0.0; y.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    if is == 0.0 {
                        continue;
                    }
                    let gr = &g.data[r * d..(r + 1) * d];
                    let yr = &y.data[r * d..(r + 1) * d];
                    let m1 = gr.iter().sum::<f64>() / d as f64;
                    let m2 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        out[r * d + i] = is * (gr[i] - m1 - yr[i] * m2);
                    }
                }
                like(*x, out)
            }),
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, y, g)?;
                ensure!(gs.len() == inputs.len(), Shape, "{} returned {} gradients", op.name(), gs.len());
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(t) = gi {
                        if t.shape != *self.shape(v) {
                            return Err(Error::Shape(format!("{} gradient shape {:?}", op.name(), t.shape)));
                        }
                        acc(v, &|| t.clone());
                    }
                }
            }
        }
        Ok(())
    }
}
