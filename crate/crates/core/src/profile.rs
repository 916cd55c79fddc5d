//! FLOP and parameter accounting for the attention baseline and the modulator.
//!
//! Closed forms follow the counting convention in [`crate::autodiff::flops`]. For `N` tokens
//! of width `D` and `h` heads:
//!
//! ```text
//! attention (biased QKV + output map)  8ND^2 + 4N^2 D + 6hN^2 + 4ND     params 4D^2 + 4D
//! modulator (depthwise mixing, width w)  6ND^2 + 2wND + 15ND            params 3(D^2 + D) + wD + D
//! ```

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{flops, Graph};
use crate::error::Result;
use crate::model::modulator::{Modulator, MIXING_KERNEL};
use crate::model::msa::{self, MsaParams};
use crate::nn::{Forward, Mode, ParamStore};
use crate::tensor::Tensor;

pub fn count_flops_msa(n: u64, d: u64, heads: u64) -> u64 {
    let mac = flops::PER_MAC;
    // Q, K, V and output maps, each with a bias
    let projections = 4 * (mac * n * d * d + flops::BIAS_ADD * n * d);
    // Q K^T and A V
    let products = 2 * mac * n * n * d;
    let per_logit = flops::ELEMENTWISE + flops::SOFTMAX;
    projections + products + per_logit * heads * n * n
}

/// The part of [`count_flops_msa`] that grows with `N^2`.
pub fn count_flops_attention_core(n: u64, d: u64, heads: u64) -> u64 {
    2 * flops::PER_MAC * n * n * d + (flops::ELEMENTWISE + flops::SOFTMAX) * heads * n * n
}

/// `w` is the token-mixing kernel width (3 in the model).
pub fn count_flops_modulator(n: u64, d: u64, w: u64) -> u64 {
    let pointwise = 3 * (flops::PER_MAC * n * d * d + flops::BIAS_ADD * n * d);
    let depthwise = flops::PER_MAC * w * n * d + flops::BIAS_ADD * n * d;
    pointwise + depthwise + flops::GELU * n * d + flops::ELEMENTWISE * n * d
}

pub fn count_params_msa(d: u64) -> u64 {
    4 * d * d + 4 * d
}

pub fn count_params_modulator(d: u64, w: u64) -> u64 {
    3 * (d * d + d) + w * d + d
}

/// FLOPs counted by the tape while running the attention layer on `n x d` input.
pub fn measure_msa(n: usize, d: usize, heads: usize, seed: u64) -> Result<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = MsaParams::standard(d, heads, &mut rng)?;
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[n, d], 1.0, &mut rng));
    msa::msa_reference(&mut g, x, &p)?;
    Ok((g.flops(), p.count_params()))
}

/// FLOPs counted for the `softmax(Q K^T / sqrt d) V` core alone.
pub fn measure_attention_core(n: usize, d: usize, heads: usize, seed: u64) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hd = d / heads;
    let mut g = Graph::new();
    let mut head = || g.constant(Tensor::randn(&[heads, n, hd], 1.0, &mut rng));
    let (q, k, v) = (head(), head(), head());
    msa::attention_core(&mut g, q, k, v)?;
    Ok(g.flops())
}

pub fn measure_modulator(n: usize, d: usize, seed: u64) -> Result<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = Modulator::new(&mut store, d, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[1, n, d], 1.0, &mut rng));
    let mut fw = Forward::new(&mut g, &store, Mode::Eval).without_grads();
    block.forward(&mut fw, x)?;
    Ok((g.flops(), store.count_trainable()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProfileRow {
    pub block: &'static str,
    pub tokens: usize,
    pub dim: usize,
    pub flops_measured: u64,
    pub flops_closed_form: u64,
    pub params: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProfileReport {
    pub rows: Vec<ProfileRow>,
}

/// Token counts of the three reference scenes (patch 15, 15 and 19, plus a class token).
pub const REFERENCE_CONFIGS: [(usize, usize); 3] = [(226, 64), (226, 64), (362, 64)];
pub const REFERENCE_HEADS: usize = 4;

impl ProfileReport {
    /// Attention and modulator rows for every `(tokens, dim)` pair.
    pub fn build(configs: &[(usize, usize)], heads: usize, seed: u64) -> Result<Self> {
        let mut rows = Vec::with_capacity(2 * configs.len());
        for &(n, d) in configs {
            let (measured, params) = measure_msa(n, d, heads, seed)?;
            rows.push(ProfileRow {
                block: "msa",
                tokens: n,
                dim: d,
                flops_measured: measured,
                flops_closed_form: count_flops_msa(n as u64, d as u64, heads as u64),
                params,
            });
            let (measured, params) = measure_modulator(n, d, seed)?;
            rows.push(ProfileRow {
                block: "modulator",
                tokens: n,
                dim: d,
                flops_measured: measured,
                flops_closed_form: count_flops_modulator(n as u64, d as u64, MIXING_KERNEL as u64),
                params,
            });
        }
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("block,config_N,config_D,flops_measured,flops_closed_form,params\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.block, r.tokens, r.dim, r.flops_measured, r.flops_closed_form, r.params
            );
        }
        s
    }
}
