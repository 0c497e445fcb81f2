//! Network layers expressed as graph operations.
//!
//! Activations flow as `[batch, positions, features]`; weights are
//! `[1, in, out]` and biases `[1, 1, out]` so they broadcast over the batch
//! and position dimensions.

use rand::Rng;

use super::arch::ArchConfig;
use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use super::tensor::Tensor;
use crate::error::DiffError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x W + b`.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` with a row-wise softmax.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, d_k: usize) -> Result<Var, DiffError> {
    let (sq, sk, sv) = (g.shape(q), g.shape(k), g.shape(v));
    if sq[2] != sk[2] || sk[1] != sv[1] || sq[2] != d_k {
        return Err(DiffError::Shape {
            op: "attention",
            lhs: sq,
            rhs: if sq[2] != sk[2] || sq[2] != d_k { sk } else { sv },
        });
    }
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax(logits);
    g.matmul(weights, v)
}

pub fn layer_norm(g: &mut Graph, x: Var, scale: Var, offset: Var, eps: f64) -> Result<Var, DiffError> {
    let [b, r, c] = g.shape(x);
    let s = g.sum_to(x, [b, r, 1])?;
    let mean = g.scale(s, 1.0 / c as f64);
    let xc = g.sub(x, mean)?;
    let sq = g.mul(xc, xc)?;
    let ss = g.sum_to(sq, [b, r, 1])?;
    let var = g.scale(ss, 1.0 / c as f64);
    let var = g.add_scalar(var, eps);
    let inv = g.powf(var, -0.5);
    let y = g.mul(xc, inv)?;
    let y = g.mul(y, scale)?;
    g.add(y, offset)
}

/// `max(0, X W1 + b1) W2 + b2`.
pub fn feed_forward(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var, DiffError> {
    let h = dense(g, x, w1, b1)?;
    let h = g.relu(h);
    dense(g, h, w2, b2)
}

/// Adds a learned `[1, L, d_x]` positional table to `x`.
pub fn positional_encode(g: &mut Graph, x: Var, pe: Var) -> Result<Var, DiffError> {
    let (sx, sp) = (g.shape(x), g.shape(pe));
    if sp[0] != 1 || sx[1] != sp[1] || sx[2] != sp[2] {
        return Err(DiffError::Shape {
            op: "positional_encode",
            lhs: sx,
            rhs: sp,
        });
    }
    g.add(x, pe)
}

#[derive(Debug, Clone)]
pub struct MhaParams {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
}

/// Concatenated per-head attention outputs projected by `W⁰`.
pub fn multi_head_attention(g: &mut Graph, x: Var, p: &MhaParams) -> Result<Var, DiffError> {
    let h = p.wq.len();
    if h == 0 || p.wk.len() != h || p.wv.len() != h {
        return Err(DiffError::Structure(format!(
            "head counts q={} k={} v={}",
            p.wq.len(),
            p.wk.len(),
            p.wv.len()
        )));
    }
    let d_k = g.shape(p.wq[0])[2];
    let d_v = g.shape(p.wv[0])[2];
    // one product for all projections, then split per head
    let mut cols = Vec::with_capacity(3 * h);
    cols.extend(&p.wq);
    cols.extend(&p.wk);
    cols.extend(&p.wv);
    let w = g.concat_cols(&cols)?;
    let proj = g.matmul(x, w)?;
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        let q = g.slice_cols(proj, i * d_k, d_k)?;
        let k = g.slice_cols(proj, h * d_k + i * d_k, d_k)?;
        let v = g.slice_cols(proj, 2 * h * d_k + i * d_v, d_v)?;
        heads.push(attention(g, q, k, v, d_k)?);
    }
    let cat = if h == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(cat, p.wo)
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub mha: MhaParams,
    pub ln1_scale: Var,
    pub ln1_offset: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2_scale: Var,
    pub ln2_offset: Var,
}

impl EncoderLayerParams {
    pub fn bind(bound: &Bound, prefix: &str, heads: usize) -> Result<Self, DiffError> {
        let v = |s: &str| bound.var(&format!("{prefix}.{s}"));
        let per_head = |kind: &str| -> Result<Vec<Var>, DiffError> {
            (0..heads).map(|i| v(&format!("attn.{kind}.{i}"))).collect()
        };
        Ok(EncoderLayerParams {
            mha: MhaParams {
                wq: per_head("q")?,
                wk: per_head("k")?,
                wv: per_head("v")?,
                wo: v("attn.o")?,
            },
            ln1_scale: v("ln1.scale")?,
            ln1_offset: v("ln1.offset")?,
            w1: v("ffn.w1")?,
            b1: v("ffn.b1")?,
            w2: v("ffn.w2")?,
            b2: v("ffn.b2")?,
            ln2_scale: v("ln2.scale")?,
            ln2_offset: v("ln2.offset")?,
        })
    }
}

/// `LN(x + MHA(x))` followed by `LN(y + FFN(y))`.
pub fn encoder_layer(g: &mut Graph, x: Var, p: &EncoderLayerParams) -> Result<Var, DiffError> {
    let a = multi_head_attention(g, x, &p.mha)?;
    let r = g.add(x, a)?;
    let y = layer_norm(g, r, p.ln1_scale, p.ln1_offset, LAYER_NORM_EPS)?;
    let f = feed_forward(g, y, p.w1, p.b1, p.w2, p.b2)?;
    let r = g.add(y, f)?;
    layer_norm(g, r, p.ln2_scale, p.ln2_offset, LAYER_NORM_EPS)
}

pub fn transformer_encoder(g: &mut Graph, x: Var, layers: &[EncoderLayerParams]) -> Result<Var, DiffError> {
    layers.iter().try_fold(x, |h, p| encoder_layer(g, h, p))
}

pub(crate) fn init_dense<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<(), DiffError> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.push_uniform(rng, format!("{prefix}.w"), [1, fan_in, fan_out], bound)?;
    store.insert(format!("{prefix}.b"), Tensor::zeros([1, 1, fan_out]))
}

pub(crate) fn init_encoder_layer<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    arch: &ArchConfig,
) -> Result<(), DiffError> {
    let (d, dk, h) = (arch.d_x, arch.d_k(), arch.heads);
    let b_in = 1.0 / (d as f64).sqrt();
    for kind in ["q", "k", "v"] {
        for i in 0..h {
            store.push_uniform(rng, format!("{prefix}.attn.{kind}.{i}"), [1, d, dk], b_in)?;
        }
    }
    store.push_uniform(
        rng,
        format!("{prefix}.attn.o"),
        [1, h * dk, d],
        1.0 / ((h * dk) as f64).sqrt(),
    )?;
    store.insert(format!("{prefix}.ln1.scale"), Tensor::full([1, 1, d], 1.0))?;
    store.insert(format!("{prefix}.ln1.offset"), Tensor::zeros([1, 1, d]))?;
    store.push_uniform(rng, format!("{prefix}.ffn.w1"), [1, d, d], b_in)?;
    store.insert(format!("{prefix}.ffn.b1"), Tensor::zeros([1, 1, d]))?;
    store.push_uniform(rng, format!("{prefix}.ffn.w2"), [1, d, d], b_in)?;
    store.insert(format!("{prefix}.ffn.b2"), Tensor::zeros([1, 1, d]))?;
    store.insert(format!("{prefix}.ln2.scale"), Tensor::full([1, 1, d], 1.0))?;
    store.insert(format!("{prefix}.ln2.offset"), Tensor::zeros([1, 1, d]))
}
