//! End-to-end commands behind the command-line tool. Each writes its outputs under the
//! configured output directory and returns what it computed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checks::{run_grad_checks, BlockCheck, CheckSettings};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{Ablation, Thsgr};
use crate::preprocess::{
    check_coregistered, extract_samples, make_split, normalize, raster, LabelMap, ModalSample, Pca,
    SceneCube, Split,
};
use crate::profile::{ProfileReport, REFERENCE_CONFIGS};
use crate::synth;
use crate::train::{self, TrainOutcome};

const EVAL_BATCH: usize = 128;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    Ok(cfg.out.clone())
}

/// Raw rasters from disk, or a synthetic scene when no paths are configured.
pub fn load_scene(cfg: &RunConfig) -> Result<(SceneCube, SceneCube, LabelMap)> {
    let (hsi, aux, labels) = match (&cfg.hsi_path, &cfg.aux_path, &cfg.labels_path) {
        (Some(h), Some(a), Some(l)) => (
            raster::read_cube(h)?,
            raster::read_cube(a)?,
            raster::read_labels(l)?,
        ),
        _ => {
            let scene = synth::generate(&cfg.synth_spec())?;
            (scene.hsi, scene.aux, scene.labels)
        }
    };
    check_coregistered(&hsi, &aux, &labels)?;
    Ok((hsi, aux, labels))
}

/// Model-ready scene: HSI bands normalized, reduced to `pcs` components and rescaled to
/// `[0, 1]`; auxiliary bands normalized.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub hsi: SceneCube,
    pub aux: SceneCube,
    pub labels: LabelMap,
    pub classes: usize,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (hsi, aux, labels) = load_scene(cfg)?;
    if cfg.pcs > hsi.channels {
        return Err(Error::config(
            "pcs",
            format!(
                "{} components exceed the {} HSI bands",
                cfg.pcs, hsi.channels
            ),
        ));
    }
    let normed = normalize(&hsi);
    let reduced = Pca::fit(&normed, cfg.pcs)?.transform(&normed)?;
    let classes = labels.classes();
    if classes < 2 {
        return Err(Error::Data(format!(
            "label map holds {classes} classes, need at least 2"
        )));
    }
    Ok(Prepared {
        hsi: normalize(&reduced),
        aux: normalize(&aux),
        labels,
        classes,
    })
}

#[derive(Clone, Debug)]
pub struct Datasets {
    pub split: Split,
    pub train: Vec<ModalSample>,
    pub test: Vec<ModalSample>,
}

pub fn datasets(cfg: &RunConfig, data: &Prepared) -> Result<Datasets> {
    let split = make_split(&data.labels, &cfg.split_spec())?;
    Ok(Datasets {
        train: extract_samples(&data.hsi, &data.aux, &split.train, cfg.patch)?,
        test: extract_samples(&data.hsi, &data.aux, &split.test, cfg.patch)?,
        split,
    })
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = out_dir(cfg)?;
    let scene = synth::generate(&cfg.synth_spec())?;
    let paths = [
        dir.join("hsi.thsg"),
        dir.join("aux.thsg"),
        dir.join("labels.thsg"),
    ];
    raster::write_cube(&paths[0], &scene.hsi)?;
    raster::write_cube(&paths[1], &scene.aux)?;
    raster::write_labels(&paths[2], &scene.labels)?;
    Ok(paths.to_vec())
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: Thsgr,
    pub outcome: TrainOutcome,
    pub data: Datasets,
}

/// Trains from scratch without writing anything.
pub fn train_only(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let data = datasets(cfg, &prepared)?;
    let mut model = Thsgr::new(
        cfg.model_config(prepared.aux.channels, prepared.classes),
        cfg.seed,
    )?;
    let outcome = train::train(&mut model, &data.train, &cfg.train_config())?;
    Ok(TrainRun {
        model,
        outcome,
        data,
    })
}

/// Trains and writes `model.json` and `loss_curve.csv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainRun> {
    let run = train_only(cfg)?;
    let dir = out_dir(cfg)?;
    run.model.save(&dir.join("model.json"))?;
    write(&dir.join("loss_curve.csv"), run.outcome.curve_csv())?;
    Ok(run)
}

fn metrics_csv(r: &EvalReport) -> String {
    format!(
        "oa,aa,kappa,samples\n{:?},{:?},{:?},{}\n",
        r.oa,
        r.aa,
        r.kappa,
        r.confusion.total()
    )
}

/// Evaluates a saved model on the test split and writes `confusion.csv`, `metrics.csv`,
/// `map.pgm` and `predictions.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    let ckpt = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| dir.join("model.json"));
    let model = Thsgr::load(&ckpt)?;
    let prepared = prepare(cfg)?;
    let (c, mc) = (&cfg.patch, &model.config);
    if (*c, cfg.pcs, prepared.aux.channels, prepared.classes)
        != (mc.patch, mc.pcs, mc.aux_bands, mc.classes)
    {
        return Err(Error::config(
            "checkpoint",
            format!("{} was trained for a different patch size, component count, band count or class count", ckpt.display()),
        ));
    }
    let data = datasets(cfg, &prepared)?;
    let report = train::evaluate(&model, &data.test, EVAL_BATCH)?;
    write(&dir.join("confusion.csv"), report.confusion.to_csv())?;
    write(&dir.join("metrics.csv"), metrics_csv(&report))?;

    let pred = train::predict(&model, &data.test, EVAL_BATCH)?;
    let mut map = vec![0u16; prepared.labels.raw.len()];
    for (s, p) in data.test.iter().zip(&pred) {
        map[s.row * prepared.labels.width + s.col] = *p as u16 + 1;
    }
    let map = LabelMap {
        raw: map,
        ..prepared.labels.clone()
    };
    export_map(
        &map,
        &prepared.labels,
        prepared.classes,
        &dir.join("map.pgm"),
        &dir.join("predictions.csv"),
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub rung: &'static str,
    pub ablation: Ablation,
    /// Test accuracy per seed.
    pub oa: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl AblationRow {
    pub fn mean_oa(&self) -> f64 {
        self.oa.iter().sum::<f64>() / self.oa.len() as f64
    }

    pub fn mean_kappa(&self) -> f64 {
        self.kappa.iter().sum::<f64>() / self.kappa.len() as f64
    }
}

/// Trains the four cumulative variants for `ablate_seeds` consecutive seeds each (scene,
/// split and initialization all follow the seed) and writes `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (rung, ablation) in Ablation::ladder() {
        let mut row = AblationRow {
            rung,
            ablation,
            oa: Vec::new(),
            kappa: Vec::new(),
        };
        for seed in cfg.seed..cfg.seed + cfg.ablate_seeds as u64 {
            let run_cfg = RunConfig {
                seed,
                ablation,
                ..cfg.clone()
            };
            let run = train_only(&run_cfg)?;
            let report = train::evaluate(&run.model, &run.data.test, EVAL_BATCH)?;
            row.oa.push(report.oa);
            row.kappa.push(report.kappa);
        }
        rows.push(row);
    }
    let mut csv = String::from("rung,graph_encoder,modulator,mean_forward,seeds,oa,kappa\n");
    for r in &rows {
        let a = r.ablation;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{:?},{:?}",
            r.rung,
            !a.no_graph_encoder,
            !a.no_modulator,
            !a.no_mean_forward,
            r.oa.len(),
            r.mean_oa(),
            r.mean_kappa()
        );
    }
    write(&out_dir(cfg)?.join("ablation.csv"), csv)?;
    Ok(rows)
}

/// Attention vs modulator at the three reference sizes and at the configured size; writes
/// `profile.csv`.
pub fn cmd_profile(cfg: &RunConfig) -> Result<ProfileReport> {
    cfg.validate()?;
    let mut configs = REFERENCE_CONFIGS.to_vec();
    configs.push((cfg.patch * cfg.patch + 1, cfg.dim));
    let report = ProfileReport::build(&configs, cfg.heads, cfg.seed)?;
    write(&out_dir(cfg)?.join("profile.csv"), report.to_csv())?;
    Ok(report)
}

/// Runs every block check and writes `gradcheck.csv`.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<BlockCheck>> {
    let checks = run_grad_checks(&CheckSettings {
        seed: cfg.seed,
        ..CheckSettings::default()
    })?;
    let mut csv = String::from("block,target,max_rel_error,checked,skipped,passed\n");
    for c in &checks {
        let _ = writeln!(
            csv,
            "{},{},{:e},{},{},{}",
            c.block,
            c.target,
            c.report.max_rel_error,
            c.report.checked,
            c.report.skipped,
            c.report.passed
        );
    }
    write(&out_dir(cfg)?.join("gradcheck.csv"), csv)?;
    Ok(checks)
}

/// Gray level of a 1-indexed class (0 stays 0).
pub fn gray_level(class: u16, classes: usize) -> u8 {
    ((class as usize * 255) / classes.max(1)).min(255) as u8
}

/// Writes predictions as a binary PGM and a `row,col,pred,true` CSV of predicted pixels.
///
/// Both maps use the on-disk convention: classes `1..=C`, 0 for no prediction or no label.
/// The PGM header is `P5\n<width> <height>\n255\n` followed by one byte per pixel, row-major,
/// holding `class * 255 / C`.
pub fn export_map(
    pred: &LabelMap,
    truth: &LabelMap,
    classes: usize,
    pgm: &Path,
    csv: &Path,
) -> Result<()> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::shape(
            "export_map",
            &[pred.height, pred.width],
            &[truth.height, truth.width],
        ));
    }
    let mut img = format!("P5\n{} {}\n255\n", pred.width, pred.height).into_bytes();
    img.extend(pred.raw.iter().map(|&c| gray_level(c, classes)));
    write(pgm, img)?;
    let mut rows = String::from("row,col,pred,true\n");
    for (i, (&p, &t)) in pred.raw.iter().zip(&truth.raw).enumerate() {
        if p != 0 {
            let _ = writeln!(rows, "{},{},{},{}", i / pred.width, i % pred.width, p, t);
        }
    }
    write(csv, rows)
}

/// Reads a binary PGM written by [`export_map`]: `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.into(),
        msg: msg.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit binary PGM"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h {
        return Err(bad("pixel count does not match header"));
    }
    Ok((w, h, body.to_vec()))
}
