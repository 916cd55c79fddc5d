//! The full classifier: two modality branches, graph fusion, token embedding,
//! convolutional modulator, mean-forward block and a pooled linear head.

pub mod embedding;
pub mod graph_encoder;
pub mod head;
pub mod hetero;
pub mod modulator;
pub mod msa;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Forward, Mode, ParamStore};
use crate::tensor::Tensor;

pub use embedding::PatchEmbedding;
pub use graph_encoder::{GraphEncoder, GraphRepr};
pub use head::{ClassifierHead, MeanForward};
pub use hetero::{HsiBranch, SarBranch};
pub use modulator::Modulator;

/// Which optional blocks are switched off. A disabled block becomes the identity;
/// with the graph encoder off the two branch outputs are summed instead.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_graph_encoder: bool,
    pub no_modulator: bool,
    pub no_mean_forward: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        no_graph_encoder: false,
        no_modulator: false,
        no_mean_forward: false,
    };
    pub const BACKBONE: Ablation = Ablation {
        no_graph_encoder: true,
        no_modulator: true,
        no_mean_forward: true,
    };

    /// The cumulative ladder: backbone, +graph encoder, +modulator, +mean forward.
    pub fn ladder() -> [(&'static str, Ablation); 4] {
        [
            ("backbone", Self::BACKBONE),
            (
                "+graph",
                Ablation {
                    no_graph_encoder: false,
                    ..Self::BACKBONE
                },
            ),
            (
                "+modulator",
                Ablation {
                    no_mean_forward: true,
                    ..Self::FULL
                },
            ),
            ("full", Self::FULL),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Patch side `k`; `N = k * k` tokens.
    pub patch: usize,
    /// Spectral components fed to the HSI branch.
    pub pcs: usize,
    /// Auxiliary (SAR / LiDAR) bands.
    pub aux_bands: usize,
    pub classes: usize,
    pub hsi_widths: [usize; 3],
    pub sar_width: usize,
    /// Channel width of both branch outputs and of the graph representation.
    pub fused: usize,
    /// Token width after embedding.
    pub dim: usize,
    /// Hidden width of the mean-forward block.
    pub hidden: usize,
    pub leaky_alpha: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 15,
            pcs: 32,
            aux_bands: 1,
            classes: 2,
            hsi_widths: [8, 16, 32],
            sar_width: 32,
            fused: 64,
            dim: 64,
            hidden: 256,
            leaky_alpha: 100.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            ablation: Ablation::FULL,
        }
    }
}

impl ModelConfig {
    /// Small widths that keep a CPU training run in the seconds range.
    pub fn toy(pcs: usize, aux_bands: usize, classes: usize) -> Self {
        Self {
            patch: 7,
            pcs,
            aux_bands,
            classes,
            hsi_widths: [4, 4, 8],
            sar_width: 8,
            fused: 16,
            dim: 16,
            hidden: 64,
            ..Self::default()
        }
    }

    pub fn tokens(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch.is_multiple_of(2) {
            return Err(Error::config(
                "patch",
                format!("must be odd and positive, got {}", self.patch),
            ));
        }
        if hetero::spectral_extent(self.pcs).is_none() {
            return Err(Error::config(
                "pcs",
                format!("need at least 13 components, got {}", self.pcs),
            ));
        }
        for (field, v) in [
            ("aux_bands", self.aux_bands),
            ("sar_width", self.sar_width),
            ("fused", self.fused),
            ("dim", self.dim),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.hsi_widths.contains(&0) {
            return Err(Error::config("hsi_widths", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config(
                "classes",
                format!("need at least 2, got {}", self.classes),
            ));
        }
        if self.leaky_alpha <= 1.0 || !self.leaky_alpha.is_finite() {
            return Err(Error::config(
                "leaky_alpha",
                format!("must be finite and > 1, got {}", self.leaky_alpha),
            ));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config("bn_eps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Model input for a batch of `B` pixels.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 1, pcs, k, k]`
    pub hsi: Tensor,
    /// `[B, aux_bands, k, k]`
    pub aux: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.hsi.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub o1: Var,
    pub o2: Var,
    pub fused: Var,
    pub graph: Option<GraphRepr>,
    pub embedded: Var,
    pub modulated: Var,
    pub mixed: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Thsgr {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub hsi: HsiBranch,
    pub aux: SarBranch,
    pub graph: GraphEncoder,
    pub embed: PatchEmbedding,
    pub modulator: Modulator,
    pub mean_forward: MeanForward,
    pub head: ClassifierHead,
}

impl Thsgr {
    /// Builds every block, including disabled ones, so parameter layout does not depend on
    /// the ablation switches.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hsi = HsiBranch::new(&mut store, &config, &mut rng)?;
        let aux = SarBranch::new(&mut store, &config, &mut rng);
        let graph = GraphEncoder::new(&mut store, config.patch, config.fused, &mut rng);
        let embed = PatchEmbedding::new(
            &mut store,
            config.tokens(),
            config.fused,
            config.dim,
            &mut rng,
        );
        let modulator = Modulator::new(&mut store, config.dim, &mut rng);
        let mean_forward = MeanForward::new(&mut store, config.dim, config.hidden, &mut rng);
        let head = ClassifierHead::new(&mut store, config.dim, config.classes, &mut rng);
        Ok(Self {
            config,
            store,
            hsi,
            aux,
            graph,
            embed,
            modulator,
            mean_forward,
            head,
        })
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        let b = batch.hsi.shape().first().copied().unwrap_or(0);
        let want_hsi = [b, 1, c.pcs, c.patch, c.patch];
        if batch.hsi.shape() != want_hsi {
            return Err(Error::shape(
                "model_input_hsi",
                batch.hsi.shape(),
                &want_hsi,
            ));
        }
        let want_aux = [b, c.aux_bands, c.patch, c.patch];
        if batch.aux.shape() != want_aux {
            return Err(Error::shape(
                "model_input_aux",
                batch.aux.shape(),
                &want_aux,
            ));
        }
        Ok(())
    }

    /// Records the whole forward pass on `fw.graph`.
    pub fn forward(&self, fw: &mut Forward, batch: &Batch) -> Result<Trace> {
        self.check_batch(batch)?;
        let ab = self.config.ablation;
        let x = fw.graph.constant(batch.hsi.clone());
        let y = fw.graph.constant(batch.aux.clone());
        let o1 = self.hsi.forward(fw, x)?;
        let o2 = self.aux.forward(fw, y)?;
        let (fused, graph) = if ab.no_graph_encoder {
            (fw.graph.add(o1, o2)?, None)
        } else {
            let repr = self.graph.forward(fw, o1, o2)?;
            (repr.g, Some(repr))
        };
        let embedded = self.embed.forward(fw, fused)?;
        let modulated = if ab.no_modulator {
            embedded
        } else {
            self.modulator.forward(fw, embedded)?
        };
        let mixed = if ab.no_mean_forward {
            modulated
        } else {
            self.mean_forward.forward(fw, modulated)?
        };
        let logits = self.head.forward(fw, mixed)?;
        Ok(Trace {
            o1,
            o2,
            fused,
            graph,
            embedded,
            modulated,
            mixed,
            logits,
        })
    }

    /// Inference logits `[B, classes]` using running batch-norm statistics.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &self.store, Mode::Eval).without_grads();
        let trace = self.forward(&mut fw, batch)?;
        Ok(g.value(trace.logits).clone())
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }

    pub fn count_params(&self) -> u64 {
        self.store.count_trainable()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            config: self.config.clone(),
            params: self
                .store
                .iter()
                .map(|(_, p)| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::Format {
            path: path.into(),
            msg: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            msg: e.to_string(),
        })?;
        let mut model = Self::new(ckpt.config, 0)?;
        if ckpt.params.len() != model.store.len() {
            return Err(Error::Format {
                path: path.into(),
                msg: format!(
                    "expected {} tensors, found {}",
                    model.store.len(),
                    ckpt.params.len()
                ),
            });
        }
        let ids: Vec<_> = model
            .store
            .iter()
            .map(|(id, p)| (id, p.name.clone()))
            .collect();
        for ((id, name), stored) in ids.into_iter().zip(ckpt.params) {
            if name != stored.name {
                return Err(Error::Format {
                    path: path.into(),
                    msg: format!("tensor {name} stored as {}", stored.name),
                });
            }
            let t = model.store.get_mut(id);
            if t.shape() != stored.shape.as_slice() || stored.data.len() != t.numel() {
                return Err(Error::Format {
                    path: path.into(),
                    msg: format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        stored.shape,
                        t.shape()
                    ),
                });
            }
            t.data_mut().copy_from_slice(&stored.data);
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    params: Vec<StoredParam>,
}

/// Index of the largest entry of each row of a `[B, C]` tensor; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
