//! Layers built from graph operations.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use crate::error::{ensure, Result};
use crate::rng::Rng;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self::with_init(store, name, d_in, d_out, Init::TruncNormal { std: INIT_STD }, rng)
    }

    pub fn with_init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.w"), &[d_in, d_out], init, rng);
        let b = Some(store.add(format!("{name}.b"), &[d_out], Init::Zeros, rng));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bcast(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), &[d], Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), &[d], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layernorm(x, gamma, beta)
    }
}

/// Scaled dot-product self-attention over the middle axis of `[G, n, d]`.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub d_model: usize,
    pub n_heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        ensure!(n_heads >= 1 && d_model.is_multiple_of(n_heads), Invalid, "d_model {d_model} not divisible by {n_heads} heads");
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), d_model, 3 * d_model, rng),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng),
            d_model,
            n_heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        ensure!(s.len() == 3 && s[2] == self.d_model, Shape, "attention input {s:?}, d_model {}", self.d_model);
        let (groups, n, d) = (s[0], s[1], s[2]);
        let h = self.n_heads;
        let dh = d / h;
        let qkv = self.qkv.forward(g, store, x)?;
        let heads = |g: &mut Graph, i: usize| -> Result<Var> {
            let t = g.slice_last(qkv, i * d, d)?;
            let t = g.reshape(t, &[groups, n, h, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[groups * h, n, dh])
        };
        let q = heads(g, 0)?;
        let k = heads(g, 1)?;
        let v = heads(g, 2)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_last(scores);
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.reshape(ctx, &[groups, h, n, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[groups, n, d])?;
        self.out.forward(g, store, ctx)
    }
}

/// Post-norm transformer encoder layer: attention and a GELU feed-forward
/// block, each followed by a residual sum and layer normalization.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadSelfAttention,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, d_ff: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadSelfAttention::new(store, &format!("{name}.attn"), d_model, n_heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model, rng),
            ff1: Linear::new(store, &format!("{name}.ff1"), d_model, d_ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), d_ff, d_model, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model, rng),
        })
    }

    /// `x`: `[G, n, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, store, x)?;
        let h = g.add(x, a)?;
        let h = self.ln1.forward(g, store, h)?;
        let f = self.ff1.forward(g, store, h)?;
        let f = g.gelu(f);
        let f = self.ff2.forward(g, store, f)?;
        let o = g.add(h, f)?;
        self.ln2.forward(g, store, o)
    }
}

/// Same-length temporal convolution of `[N, L, C_in]` with an odd kernel.
#[derive(Clone, Debug)]
pub struct Conv1dTime {
    pub kernel: usize,
    pub proj: Linear,
}

impl Conv1dTime {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, rng: &mut Rng) -> Self {
        Self { kernel, proj: Linear::new(store, name, kernel * c_in, c_out, rng) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = g.im2col_time(x, self.kernel)?;
        self.proj.forward(g, store, cols)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

/// `[n, dim]` table: first half `sin(p·ω_i)`, second half `cos(p·ω_i)`,
/// `ω_i = 10000^{−i/(dim/2)}`.
pub fn sinusoidal_embedding(positions: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let omegas: Vec<f64> = (0..half).map(|i| 10000f64.powf(-(i as f64) / half.max(1) as f64)).collect();
    let mut out = vec![0.0; positions.len() * dim];
    for (r, &p) in positions.iter().enumerate() {
        for (i, w) in omegas.iter().enumerate() {
            let (s, c) = (p * w).sin_cos();
            out[r * dim + i] = s;
            out[r * dim + half + i] = c;
        }
    }
    out
}
