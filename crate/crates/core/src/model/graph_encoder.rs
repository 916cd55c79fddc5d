//! Dynamic, input-specific graph encoder.
//!
//! Every spatial position of the `k x k` patch is a node (`N = k^2`), and every
//! node carries a `D`-dim feature. With HSI features `o1` and SAR/LiDAR
//! features `o2` (both `[B, D, k, k]`):
//!
//! | symbol | construction                              | shape    |
//! |--------|-------------------------------------------|----------|
//! | mask   | `sigmoid(conv1x1_m(o2))`                  | `[B,D,k,k]` |
//! | T      | `conv1x1_f(o2) * mask` as tokens          | `[B,N,D]` |
//! | K      | `o2` with channels first                  | `[B,D,N]` |
//! | Q      | `conv1x1_q(o1)` as tokens                 | `[B,N,D]` |
//! | V      | `o1` as tokens                            | `[B,N,D]` |
//! | A      | `softmax_rows(Q K)`                       | `[B,N,N]` |
//! | M_r    | `sigmoid(K T)`                            | `[B,D,D]` |
//! | W      | `conv1d_k1(A V)` with nodes as channels   | `[B,D,D]` |
//! | G      | `(A V) W M_r`                             | `[B,N,D]` |

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Forward, ParamStore};

#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub mask: Conv,
    pub feature: Conv,
    pub query: Conv,
    pub reweight: Conv,
    pub nodes: usize,
    pub dim: usize,
}

/// Intermediate products of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct GraphRepr {
    /// `[B, D, k, k]`, ready for patch embedding.
    pub g: Var,
    pub a: Var,
    pub m_r: Var,
    pub w: Var,
}

impl GraphEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        patch: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let nodes = patch * patch;
        Self {
            mask: Conv::same(store, "graph.mask", dim, dim, &[1, 1], rng),
            feature: Conv::same(store, "graph.feature", dim, dim, &[1, 1], rng),
            query: Conv::same(store, "graph.query", dim, dim, &[1, 1], rng),
            reweight: Conv::same(store, "graph.reweight", nodes, dim, &[1], rng),
            nodes,
            dim,
        }
    }

    fn check(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.dim || s[2] * s[3] != self.nodes {
            return Err(Error::shape(
                "graph_encoder",
                s,
                &[0, self.dim, self.nodes, 1],
            ));
        }
        Ok(())
    }

    pub fn make_mask(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let pre = self.mask.forward(fw, x)?;
        Ok(fw.graph.sigmoid(pre))
    }

    /// Gated features `conv1x1(x) * mask(x)` as a `[B, N, D]` token matrix.
    pub fn masked_features(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let m = self.make_mask(fw, x)?;
        let f = self.feature.forward(fw, x)?;
        let t = fw.graph.mul(f, m)?;
        tokens(fw.graph, t)
    }

    /// `W = conv1d_k1(A V)`, the input-specific `D x D` weight.
    pub fn dynamic_weight(&self, fw: &mut Forward, av: Var) -> Result<Var> {
        // [B, N, D] read as N channels over a length-D axis
        self.reweight.forward(fw, av)
    }

    pub fn forward(&self, fw: &mut Forward, o1: Var, o2: Var) -> Result<GraphRepr> {
        self.check(fw.graph, o1)?;
        self.check(fw.graph, o2)?;
        if fw.graph.shape(o1) != fw.graph.shape(o2) {
            return Err(Error::shape(
                "graph_encoder",
                fw.graph.shape(o1),
                fw.graph.shape(o2),
            ));
        }
        let s = fw.graph.shape(o1).to_vec();
        let t = self.masked_features(fw, o2)?;
        let k = fw.graph.reshape(o2, &[s[0], self.dim, self.nodes])?;
        let q = self.query.forward(fw, o1)?;
        let q = tokens(fw.graph, q)?;
        let v = tokens(fw.graph, o1)?;

        let a = attention_map(fw.graph, q, k)?;
        let m_r = relationship_matrix(fw.graph, k, t)?;
        let av = fw.graph.matmul(a, v)?;
        let w = self.dynamic_weight(fw, av)?;
        let g = compose(fw.graph, av, w, m_r)?;
        let g = fw.graph.transpose(g, 1, 2)?;
        let g = fw.graph.reshape(g, &s)?;
        Ok(GraphRepr { g, a, m_r, w })
    }
}

/// `[B, C, h, w]` -> `[B, h*w, C]`.
pub fn tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.transpose(flat, 1, 2)
}

/// `M_r = sigmoid(K T)`.
pub fn relationship_matrix(g: &mut Graph, k: Var, t: Var) -> Result<Var> {
    let kt = g.matmul(k, t)?;
    Ok(g.sigmoid(kt))
}

/// `A = softmax(Q K)` normalized along each row.
pub fn attention_map(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let qk = g.matmul(q, k)?;
    let last = g.shape(qk).len() - 1;
    g.softmax(qk, last)
}

/// `G = (A V) W M_r`.
pub fn compose(g: &mut Graph, av: Var, w: Var, m_r: Var) -> Result<Var> {
    let h = g.matmul(av, w)?;
    g.matmul(h, m_r)
}
