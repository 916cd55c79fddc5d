//! Reference multi-head self-attention, used as a verification and profiling baseline.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Projection weights for `Q, K, V = X W_Q, X W_K, X W_V` (each `D x D`), plus the
/// optional pieces of a standard attention layer (projection biases and the output map).
#[derive(Clone, Debug)]
pub struct MsaParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub biases: Option<[Tensor; 3]>,
    pub output: Option<(Tensor, Tensor)>,
    pub heads: usize,
}

impl MsaParams {
    /// Bias-free Q/K/V maps only.
    pub fn bare<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(dim, heads)?;
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            wq: Tensor::uniform(&[dim, dim], bound, rng),
            wk: Tensor::uniform(&[dim, dim], bound, rng),
            wv: Tensor::uniform(&[dim, dim], bound, rng),
            biases: None,
            output: None,
            heads,
        })
    }

    /// A full attention layer: biased Q/K/V maps and a biased output projection.
    pub fn standard<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::bare(dim, heads, rng)?;
        let bound = 1.0 / (dim as f64).sqrt();
        p.biases = Some(std::array::from_fn(|_| Tensor::uniform(&[dim], bound, rng)));
        p.output = Some((
            Tensor::uniform(&[dim, dim], bound, rng),
            Tensor::uniform(&[dim], bound, rng),
        ));
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn count_params(&self) -> u64 {
        let mut n = (self.wq.numel() + self.wk.numel() + self.wv.numel()) as u64;
        if let Some(b) = &self.biases {
            n += b.iter().map(|t| t.numel() as u64).sum::<u64>();
        }
        if let Some((w, b)) = &self.output {
            n += (w.numel() + b.numel()) as u64;
        }
        n
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Param(format!(
            "dimension {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

fn project(g: &mut Graph, x: Var, w: &Tensor, b: Option<&Tensor>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let y = g.matmul(x, wv)?;
    match b {
        None => Ok(y),
        Some(b) => {
            let bv = g.constant(b.reshape(&[1, b.numel()])?);
            g.add(y, bv)
        }
    }
}

/// `[N, D]` -> `[h, N, d]`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], heads, s[1] / heads])?;
    g.permute(r, &[1, 0, 2])
}

/// `[h, N, d]` -> `[N, D]`
fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[1, 0, 2])?;
    g.reshape(p, &[s[1], s[0] * s[2]])
}

fn check_input(g: &Graph, x: Var, p: &MsaParams) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != p.dim() {
        return Err(Error::shape("msa", s, p.wq.shape()));
    }
    Ok(())
}

fn finish(g: &mut Graph, heads_out: Var, p: &MsaParams) -> Result<Var> {
    let merged = merge_heads(g, heads_out)?;
    match &p.output {
        None => Ok(merged),
        Some((w, b)) => project(g, merged, w, Some(b)),
    }
}

/// Scaled dot-product attention core on already-split heads: `softmax(Q K^T / sqrt d) V`.
pub fn attention_core(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *g.shape(q).last().unwrap();
    let kt = g.transpose(k, 1, 2)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(logits, 2)?;
    g.matmul(attn, v)
}

/// Standard multi-head attention on `X: [N, D]`, heads concatenated.
pub fn msa_reference(g: &mut Graph, x: Var, p: &MsaParams) -> Result<Var> {
    check_input(g, x, p)?;
    let b = p.biases.as_ref();
    let q = project(g, x, &p.wq, b.map(|b| &b[0]))?;
    let k = project(g, x, &p.wk, b.map(|b| &b[1]))?;
    let v = project(g, x, &p.wv, b.map(|b| &b[2]))?;
    let (q, k, v) = (
        split_heads(g, q, p.heads)?,
        split_heads(g, k, p.heads)?,
        split_heads(g, v, p.heads)?,
    );
    let out = attention_core(g, q, k, v)?;
    finish(g, out, p)
}

/// The same attention written with the merged bilinear map `W = W_Q W_K^T` per head:
/// `softmax(X W X^T / sqrt d)(X W_V)`. Only meaningful for bias-free Q/K maps.
pub fn msa_merged(g: &mut Graph, x: Var, p: &MsaParams) -> Result<Var> {
    check_input(g, x, p)?;
    let (n, dim, h) = (g.shape(x)[0], p.dim(), p.heads);
    let d = dim / h;
    // per-head column blocks of W_Q and W_K: [D, D] -> [h, D, d]
    let wq = g.constant(p.wq.reshape(&[dim, h, d])?);
    let wq = g.permute(wq, &[1, 0, 2])?;
    let wk = g.constant(p.wk.reshape(&[dim, h, d])?);
    let wk_t = g.permute(wk, &[1, 2, 0])?;
    let w = g.matmul(wq, wk_t)?;

    let xs = g.reshape(x, &[1, n, dim])?;
    let xs = g.expand(xs, &[h, n, dim])?;
    let xw = g.matmul(xs, w)?;
    let xt = g.transpose(xs, 1, 2)?;
    let logits = g.matmul(xw, xt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(logits, 2)?;

    let v = project(g, x, &p.wv, p.biases.as_ref().map(|b| &b[2]))?;
    let v = split_heads(g, v, h)?;
    let out = g.matmul(attn, v)?;
    finish(g, out, p)
}

#[derive(Clone, Debug)]
pub struct MsaFactorizationCheck {
    pub max_diff: f64,
    pub holds: bool,
}

/// Evaluates both attention forms on `x` and compares them elementwise.
pub fn verify_msa_factorization(
    x: &Tensor,
    p: &MsaParams,
    tol: f64,
) -> Result<MsaFactorizationCheck> {
    if p.biases.is_some() {
        return Err(Error::Param(
            "the merged form assumes bias-free Q/K/V maps".into(),
        ));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let direct = msa_reference(&mut g, xv, p)?;
    let merged = msa_merged(&mut g, xv, p)?;
    let max_diff = g.value(direct).max_abs_diff(g.value(merged));
    Ok(MsaFactorizationCheck {
        max_diff,
        holds: max_diff <= tol,
    })
}
