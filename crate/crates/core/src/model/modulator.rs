//! Attention-free multi-convolutional modulator.
//!
//! Over a token sequence laid out as `[B, D, T]` (channels over a 1-D token axis):
//!
//! ```text
//! left  = W2( gelu( W1 x ) )      W1: kernel 1, W2: depthwise kernel 3
//! right = W3 x                    W3: kernel 1
//! out   = W4( left * right )      W4: kernel 1
//! ```

use rand::Rng;

use crate::autodiff::{gelu, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Forward, ParamStore};
use crate::tensor::Tensor;

pub const MIXING_KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub struct Modulator {
    pub w1: Conv,
    pub w2: Conv,
    pub w3: Conv,
    pub w4: Conv,
    pub dim: usize,
}

impl Modulator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            w1: Conv::same(store, "modulator.w1", dim, dim, &[1], rng),
            w2: Conv::new(
                store,
                "modulator.w2",
                dim,
                dim,
                &[MIXING_KERNEL],
                &[MIXING_KERNEL / 2],
                dim,
                true,
                rng,
            ),
            w3: Conv::same(store, "modulator.w3", dim, dim, &[1], rng),
            w4: Conv::same(store, "modulator.w4", dim, dim, &[1], rng),
            dim,
        }
    }

    /// Core block on the channel-first layout `[B, D, T]`.
    pub fn forward_channels(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let s = fw.graph.shape(x);
        if s.len() != 3 || s[1] != self.dim {
            return Err(Error::shape("modulator", s, &[0, self.dim, 0]));
        }
        let left = self.w1.forward(fw, x)?;
        let left = fw.graph.gelu(left);
        let left = self.w2.forward(fw, left)?;
        let right = self.w3.forward(fw, x)?;
        let gated = fw.graph.mul(left, right)?;
        self.w4.forward(fw, gated)
    }

    /// `o3: [B, T, D]` -> `o5: [B, T, D]`.
    pub fn forward(&self, fw: &mut Forward, o3: Var) -> Result<Var> {
        let x = fw.graph.transpose(o3, 1, 2)?;
        let y = self.forward_channels(fw, x)?;
        fw.graph.transpose(y, 1, 2)
    }
}

/// Outcome of comparing the nested and merged-weight forms of the bias-free modulator.
#[derive(Clone, Debug)]
pub struct FactorizationReport {
    pub residual: f64,
    pub tol: f64,
    pub exact: bool,
    pub note: &'static str,
}

/// Evaluates `W4((W2 gelu(W1 X)) * (W3 X))` and `(W' gelu(W1 X)) * (W3 X)` with
/// `W' = W4 W2`, for `X: [D, N]` and `D x D` channel maps.
///
/// The two agree exactly whenever `W4` commutes with the Hadamard product (scalar or
/// diagonal `W4`, or a single channel). For dense `W4` the residual is reported only.
pub fn verify_modulator_factorization(
    x: &Tensor,
    w: [&Tensor; 4],
    tol: f64,
) -> Result<FactorizationReport> {
    let d = x.shape().first().copied().unwrap_or(0);
    for wi in w {
        if x.rank() != 2 || wi.shape() != [d, d] {
            return Err(Error::shape(
                "verify_modulator_factorization",
                x.shape(),
                wi.shape(),
            ));
        }
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let [w1, w2, w3, w4] = w.map(|t| g.constant(t.clone()));
    let a = g.matmul(w1, xv)?;
    let a = g.gelu(a);
    let b = g.matmul(w3, xv)?;

    let left = g.matmul(w2, a)?;
    let nested = g.mul(left, b)?;
    let nested = g.matmul(w4, nested)?;

    let merged = g.matmul(w4, w2)?;
    let merged = g.matmul(merged, a)?;
    let merged = g.mul(merged, b)?;

    let residual = g.value(nested).max_abs_diff(g.value(merged));
    let diagonal_stem = is_diagonal(w[3]);
    let exact = residual <= tol;
    let note = match (exact, diagonal_stem || d == 1) {
        (true, _) => "identity exact",
        (false, true) => "identity violated in a regime where it should hold",
        (false, false) => "identity not exact in dense case",
    };
    Ok(FactorizationReport {
        residual,
        tol,
        exact,
        note,
    })
}

fn is_diagonal(m: &Tensor) -> bool {
    let n = m.shape()[0];
    (0..n).all(|i| (0..n).all(|j| i == j || m.at(&[i, j]) == 0.0))
}

/// Plain (non-tape) GELU over a tensor, used by tests and reports.
pub fn gelu_tensor(t: &Tensor) -> Tensor {
    t.map(gelu)
}
