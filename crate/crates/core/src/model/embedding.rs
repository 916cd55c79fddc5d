//! Patch-to-embedding: tokens, linear projection, class token, positions.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Forward, ParamId, ParamStore};
use crate::tensor::Tensor;

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub projection: ParamId,
    pub class_token: ParamId,
    pub positions: ParamId,
    pub tokens: usize,
    pub in_dim: usize,
    pub dim: usize,
}

impl PatchEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        tokens: usize,
        in_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            projection: store.add(
                "embed.projection",
                Tensor::uniform(&[in_dim, dim], bound, rng),
            ),
            class_token: store.add(
                "embed.class_token",
                Tensor::randn(&[1, 1, dim], EMBED_STD, rng),
            ),
            positions: store.add(
                "embed.positions",
                Tensor::randn(&[1, tokens + 1, dim], EMBED_STD, rng),
            ),
            tokens,
            in_dim,
            dim,
        }
    }

    /// `x: [B, D_g, k, k]` -> `[B, k*k + 1, D]`, class token first.
    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let s = fw.graph.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_dim || s[2] * s[3] != self.tokens {
            return Err(Error::shape(
                "patch_to_embedding",
                &s,
                &[0, self.in_dim, self.tokens, 1],
            ));
        }
        let b = s[0];
        let t = super::graph_encoder::tokens(fw.graph, x)?;
        let proj = fw.param(self.projection);
        let e = fw.graph.matmul(t, proj)?;
        let cls = fw.param(self.class_token);
        let cls = fw.graph.expand(cls, &[b, 1, self.dim])?;
        let seq = fw.graph.concat(&[cls, e], 1)?;
        let pos = fw.param(self.positions);
        fw.graph.add(seq, pos)
    }
}
