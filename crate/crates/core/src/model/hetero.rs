//! Modality-specific convolutional stems.
//!
//! HSI: three 3-D conv blocks (conv -> LeakyReLU -> BN) with spectral kernels
//! 7, 5, 3 that shrink the unpadded spectral axis by 12, a reshape folding the
//! spectral axis into channels, then a 3x3 conv and LeakyReLU.
//! SAR/LiDAR: channel mean (when more than one band) and two 3x3 conv blocks.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Forward, ParamStore};

use super::ModelConfig;

pub const SPECTRAL_KERNELS: [usize; 3] = [7, 5, 3];

/// Spectral extent left after the unpadded 7/5/3 kernel chain.
pub fn spectral_extent(pcs: usize) -> Option<usize> {
    let shrink: usize = SPECTRAL_KERNELS.iter().map(|k| k - 1).sum();
    pcs.checked_sub(shrink).filter(|&e| e > 0)
}

#[derive(Clone, Debug)]
pub struct HsiBranch {
    convs: Vec<Conv>,
    norms: Vec<BatchNorm>,
    fuse: Conv,
    alpha: f64,
    pcs: usize,
}

impl HsiBranch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let extent = spectral_extent(cfg.pcs).ok_or_else(|| {
            Error::config(
                "pcs",
                format!(
                    "{} components cannot pass the 7/5/3 spectral kernels (need >= 13)",
                    cfg.pcs
                ),
            )
        })?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 1;
        for (i, (&k, &cout)) in SPECTRAL_KERNELS.iter().zip(&cfg.hsi_widths).enumerate() {
            convs.push(Conv::new(
                store,
                &format!("hsi.conv3d_{i}"),
                cin,
                cout,
                &[k, 3, 3],
                &[0, 1, 1],
                1,
                true,
                rng,
            ));
            norms.push(BatchNorm::new(
                store,
                &format!("hsi.bn_{i}"),
                cout,
                cfg.bn_eps,
                cfg.bn_momentum,
            ));
            cin = cout;
        }
        let folded = cfg.hsi_widths[2] * extent;
        let fuse = Conv::same(store, "hsi.conv2d", folded, cfg.fused, &[3, 3], rng);
        Ok(Self {
            convs,
            norms,
            fuse,
            alpha: cfg.leaky_alpha,
            pcs: cfg.pcs,
        })
    }

    /// `x: [B, 1, C_p, k, k]` -> `o1: [B, C1, k, k]`.
    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let s = fw.graph.shape(x).to_vec();
        if s.len() != 5 || s[1] != 1 || s[2] != self.pcs {
            return Err(Error::shape(
                "hsi_branch",
                &s,
                &[s.first().copied().unwrap_or(0), 1, self.pcs, 0, 0],
            ));
        }
        let mut h = x;
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(fw, h)?;
            h = fw.graph.leaky_relu(h, self.alpha)?;
            h = bn.forward(fw, h)?;
        }
        let hs = fw.graph.shape(h).to_vec();
        // [B, C, D', k, k] -> [B, C*D', k, k]
        let h = fw.graph.reshape(h, &[hs[0], hs[1] * hs[2], hs[3], hs[4]])?;
        let h = self.fuse.forward(fw, h)?;
        fw.graph.leaky_relu(h, self.alpha)
    }
}

/// Channel mean over axis 1 when there is more than one band, identity otherwise.
pub fn aux_preprocess(g: &mut Graph, x: Var) -> Result<Var> {
    if g.shape(x)[1] > 1 {
        g.mean(x, 1)
    } else {
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct SarBranch {
    convs: Vec<Conv>,
    norms: Vec<BatchNorm>,
    alpha: f64,
}

impl SarBranch {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let widths = [(1, cfg.sar_width), (cfg.sar_width, cfg.fused)];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                Conv::same(store, &format!("aux.conv2d_{i}"), cin, cout, &[3, 3], rng)
            })
            .collect();
        let norms = widths
            .iter()
            .enumerate()
            .map(|(i, &(_, cout))| {
                BatchNorm::new(
                    store,
                    &format!("aux.bn_{i}"),
                    cout,
                    cfg.bn_eps,
                    cfg.bn_momentum,
                )
            })
            .collect();
        Self {
            convs,
            norms,
            alpha: cfg.leaky_alpha,
        }
    }

    /// `x: [B, C_L, k, k]` -> `o2: [B, C2, k, k]`.
    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        if fw.graph.shape(x).len() != 4 {
            return Err(Error::shape("sar_branch", fw.graph.shape(x), &[0, 0, 0, 0]));
        }
        let mut h = aux_preprocess(fw.graph, x)?;
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(fw, h)?;
            h = fw.graph.leaky_relu(h, self.alpha)?;
            h = bn.forward(fw, h)?;
        }
        Ok(h)
    }
}
