//! Run configuration: a flat `key = value` file plus command-line overrides.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and malformed
//! values are reported with the file and line they came from.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::optim::AdamConfig;
use crate::preprocess::{Rect, SplitMode, SplitSpec};
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Raster inputs; when all three are absent a synthetic scene is generated.
    pub hsi_path: Option<PathBuf>,
    pub aux_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub synth: SynthSpec,
    pub patch: usize,
    pub pcs: usize,
    pub hsi_widths: [usize; 3],
    pub sar_width: usize,
    pub fused: usize,
    pub dim: usize,
    pub hidden: usize,
    pub leaky_alpha: f64,
    pub ablation: Ablation,
    pub split: SplitMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm ceiling; `none` disables clipping.
    pub clip_norm: Option<f64>,
    pub cosine_decay: bool,
    pub seed: u64,
    pub out: PathBuf,
    /// Attention heads of the profiling baseline.
    pub heads: usize,
    /// Seeds averaged per rung by the ablation command.
    pub ablate_seeds: usize,
    /// Trained model used by `eval`; defaults to `<out>/model.json`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            hsi_path: None,
            aux_path: None,
            labels_path: None,
            // enough bands for the default component count
            synth: SynthSpec {
                hsi_bands: 48,
                ..SynthSpec::default()
            },
            patch: model.patch,
            pcs: model.pcs,
            hsi_widths: model.hsi_widths,
            sar_width: model.sar_width,
            fused: model.fused,
            dim: model.dim,
            hidden: model.hidden,
            leaky_alpha: model.leaky_alpha,
            ablation: Ablation::FULL,
            split: SplitMode::Random { per_class: 50 },
            lr: 0.01,
            weight_decay: 0.001,
            batch_size: 256,
            epochs: 120,
            clip_norm: None,
            cosine_decay: false,
            seed: 0,
            out: PathBuf::from("out"),
            heads: 4,
            ablate_seeds: 1,
            checkpoint: None,
        }
    }
}

/// Where a setting came from, for diagnostics.
#[derive(Clone, Debug)]
pub enum Origin<'a> {
    File { path: &'a Path, line: usize },
    CommandLine,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| {
        format!(
            "`{key}` expects a {}, got `{value}`",
            std::any::type_name::<T>()
        )
    })
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{value}`")),
    }
}

/// `r0,c0,r1,c1; r0,c0,r1,c1; ...`
fn parse_regions(key: &str, value: &str) -> std::result::Result<Vec<Rect>, String> {
    value
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|part| {
            let v: Vec<usize> = part
                .split(',')
                .map(|x| parse::<usize>(key, x.trim()))
                .collect::<std::result::Result<_, _>>()?;
            match v[..] {
                [row0, col0, row1, col1] if row0 < row1 && col0 < col1 => Ok(Rect { row0, col0, row1, col1 }),
                _ => Err(format!("`{key}` entries are `row0,col0,row1,col1` with row0 < row1 and col0 < col1, got `{part}`")),
            }
        })
        .collect()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let origin = Origin::File { path, line: i + 1 };
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            self.set(key.trim(), value.trim(), origin)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override given on the command line.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Usage(format!(
                "override `{assignment}` is not of the form key=value"
            ))
        })?;
        self.set(key.trim(), value.trim(), Origin::CommandLine)
    }

    pub fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<()> {
        self.assign(key, value).map_err(|msg| match origin {
            Origin::File { path, line } => Error::Parse {
                path: path.into(),
                line,
                msg,
            },
            Origin::CommandLine => Error::Config {
                field: key.into(),
                msg,
            },
        })
    }

    fn assign(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "hsi" => self.hsi_path = Some(v.into()),
            "aux" => self.aux_path = Some(v.into()),
            "labels" => self.labels_path = Some(v.into()),
            "synth.height" => self.synth.height = parse(key, v)?,
            "synth.width" => self.synth.width = parse(key, v)?,
            "synth.classes" => self.synth.classes = parse(key, v)?,
            "synth.hsi_bands" => self.synth.hsi_bands = parse(key, v)?,
            "synth.aux_bands" => self.synth.aux_bands = parse(key, v)?,
            "synth.regions" => self.synth.regions = parse(key, v)?,
            "synth.spectral_noise" => self.synth.spectral_noise = parse(key, v)?,
            "synth.aux_noise" => self.synth.aux_noise = parse(key, v)?,
            "synth.collision" => self.synth.collision = parse_bool(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "pcs" => self.pcs = parse(key, v)?,
            "hsi_widths" => {
                let w: Vec<usize> = v
                    .split(',')
                    .map(|x| parse(key, x.trim()))
                    .collect::<std::result::Result<_, _>>()?;
                self.hsi_widths = w.try_into().map_err(|_| {
                    format!("`{key}` expects three comma-separated widths, got `{v}`")
                })?;
            }
            "sar_width" => self.sar_width = parse(key, v)?,
            "fused" => self.fused = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "leaky_alpha" => self.leaky_alpha = parse(key, v)?,
            "ablate_graph" => self.ablation.no_graph_encoder = parse_bool(key, v)?,
            "ablate_modulator" => self.ablation.no_modulator = parse_bool(key, v)?,
            "ablate_meanforward" => self.ablation.no_mean_forward = parse_bool(key, v)?,
            "split" => {
                self.split = match v {
                    "random" => SplitMode::Random { per_class: 50 },
                    "spatial" => SplitMode::Spatial {
                        test_regions: Vec::new(),
                        margin: 0,
                    },
                    _ => return Err(format!("`split` is `random` or `spatial`, got `{v}`")),
                }
            }
            "per_class" => match &mut self.split {
                SplitMode::Random { per_class } => *per_class = parse(key, v)?,
                _ => return Err("`per_class` applies to `split = random`".into()),
            },
            "test_regions" => match &mut self.split {
                SplitMode::Spatial { test_regions, .. } => *test_regions = parse_regions(key, v)?,
                _ => return Err("`test_regions` applies to `split = spatial`".into()),
            },
            "margin" => match &mut self.split {
                SplitMode::Spatial { margin, .. } => *margin = parse(key, v)?,
                _ => return Err("`margin` applies to `split = spatial`".into()),
            },
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "clip_norm" => {
                self.clip_norm = match v {
                    "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "cosine_decay" => self.cosine_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = v.into(),
            "heads" => self.heads = parse(key, v)?,
            "ablate_seeds" => self.ablate_seeds = parse(key, v)?,
            "checkpoint" => self.checkpoint = Some(v.into()),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn uses_synth(&self) -> bool {
        self.hsi_path.is_none() && self.aux_path.is_none() && self.labels_path.is_none()
    }

    /// Model settings for a scene with the given auxiliary band and class counts.
    pub fn model_config(&self, aux_bands: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            patch: self.patch,
            pcs: self.pcs,
            aux_bands,
            classes,
            hsi_widths: self.hsi_widths,
            sar_width: self.sar_width,
            fused: self.fused,
            dim: self.dim,
            hidden: self.hidden,
            leaky_alpha: self.leaky_alpha,
            ablation: self.ablation,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            seed: self.seed,
            target_train_oa: None,
            clip_norm: self.clip_norm,
            cosine_decay: self.cosine_decay,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            mode: self.split.clone(),
            seed: self.seed,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    /// Checks every field that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        let given = [&self.hsi_path, &self.aux_path, &self.labels_path]
            .iter()
            .filter(|p| p.is_some())
            .count();
        if given != 0 && given != 3 {
            return Err(Error::config(
                "hsi",
                "give all of `hsi`, `aux` and `labels`, or none for a synthetic scene",
            ));
        }
        if self.uses_synth() {
            self.synth_spec().validate()?;
            if self.pcs > self.synth.hsi_bands {
                return Err(Error::config(
                    "pcs",
                    format!(
                        "{} components exceed the {} synthetic bands",
                        self.pcs, self.synth.hsi_bands
                    ),
                ));
            }
        }
        self.model_config(1, 2).validate()?;
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("heads", self.heads),
            ("ablate_seeds", self.ablate_seeds),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("{} does not divide dim {}", self.heads, self.dim),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                "lr",
                format!("must be positive, got {}", self.lr),
            ));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0 && c.is_finite())) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay * self.lr < 1.0) {
            return Err(Error::config(
                "weight_decay",
                format!(
                    "must be non-negative with lr * decay < 1, got {}",
                    self.weight_decay
                ),
            ));
        }
        match &self.split {
            SplitMode::Random { per_class: 0 } => {
                Err(Error::config("per_class", "must be positive"))
            }
            SplitMode::Spatial { test_regions, .. } if test_regions.is_empty() => Err(
                Error::config("test_regions", "spatial split needs at least one region"),
            ),
            _ => Ok(()),
        }
    }
}
