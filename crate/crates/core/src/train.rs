//! Minibatch training, batched inference and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::{Confusion, EvalReport};
use crate::model::{argmax_rows, Thsgr};
use crate::nn::{apply_stat_updates, Forward, Mode, ParamId};
use crate::optim::{Adam, AdamConfig};
use crate::preprocess::{to_batch, ModalSample};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    /// Stop once inference-mode accuracy on the training set reaches this value.
    pub target_train_oa: Option<f64>,
    /// Rescale each step's gradients so their global L2 norm is at most this.
    pub clip_norm: Option<f64>,
    /// Anneal the learning rate from `adam.lr` towards zero over the epochs (half cosine).
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
            target_train_oa: None,
            clip_norm: None,
            cosine_decay: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Sample-weighted mean training loss.
    pub loss: f64,
    /// Training-mode accuracy accumulated over the epoch's batches.
    pub acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<EpochStats>,
    pub steps: u64,
    /// Inference-mode training accuracy when a target was checked, else `None`.
    pub train_oa: Option<f64>,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,loss,acc\n");
        for e in &self.curve {
            let _ = writeln!(s, "{},{:?},{:?}", e.epoch, e.loss, e.acc);
        }
        s
    }
}

/// Splits `0..n` into runs of `size`, folding a trailing singleton into the previous run
/// (batch statistics are undefined for one sample).
fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().map(|r| r.len()) == Some(1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Step statistics for one optimizer update.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// Scales `grads` in place so their joint L2 norm does not exceed `max_norm`; returns the
/// norm before scaling.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Learning rate for a 1-based `epoch` under half-cosine annealing.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let progress = (epoch - 1) as f64 / epochs as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Forward, backward and one Adam update on a single batch.
pub fn train_step(
    model: &mut Thsgr,
    opt: &mut Adam,
    samples: &[&ModalSample],
    clip_norm: Option<f64>,
) -> Result<StepStats> {
    let (batch, labels) = to_batch(samples)?;
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &model.store, Mode::Train);
    let trace = model.forward(&mut fw, &batch)?;
    let stats = fw.take_stat_updates();
    let params = fw.bound_params();
    drop(fw);
    let loss = g.cross_entropy(trace.logits, &labels)?;
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        g.check_finite()?;
        return Err(Error::NonFinite {
            op: "cross_entropy",
            node: loss.id(),
        });
    }
    let correct = argmax_rows(g.value(trace.logits))
        .iter()
        .zip(&labels)
        .filter(|(p, t)| p == t)
        .count();
    g.backward(loss)?;
    let mut grads: Vec<_> = params
        .into_iter()
        .filter_map(|(id, v)| g.grad(v).map(|grad| (id, grad)))
        .collect();
    if let Some((id, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Data(format!(
            "gradient of {} is not finite",
            model.store.param(*id).name
        )));
    }
    if let Some(max_norm) = clip_norm {
        clip_grad_norm(&mut grads, max_norm);
    }
    opt.step(&mut model.store, &grads)?;
    apply_stat_updates(&mut model.store, &stats);
    Ok(StepStats {
        loss: loss_value,
        correct,
    })
}

pub fn train(
    model: &mut Thsgr,
    samples: &[ModalSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::config(
            "batch_size",
            "batch size and epochs must be positive",
        ));
    }
    if matches!(cfg.clip_norm, Some(c) if !(c > 0.0)) {
        return Err(Error::config("clip_norm", "must be positive"));
    }
    let mut opt = Adam::new(cfg.adam.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut train_oa = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        if cfg.cosine_decay {
            opt.config.lr = cosine_lr(cfg.adam.lr, epoch, cfg.epochs);
        }
        let (mut loss_sum, mut correct) = (0.0, 0);
        for range in batch_ranges(order.len(), cfg.batch_size) {
            let batch: Vec<&ModalSample> =
                order[range.clone()].iter().map(|&i| &samples[i]).collect();
            let step = train_step(model, &mut opt, &batch, cfg.clip_norm)?;
            loss_sum += step.loss * range.len() as f64;
            correct += step.correct;
        }
        let n = samples.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / n,
            acc: correct as f64 / n,
        };
        curve.push(stats);
        if let Some(target) = cfg.target_train_oa {
            if stats.acc >= target || epoch == cfg.epochs {
                let oa = evaluate(model, samples, cfg.batch_size)?.oa;
                train_oa = Some(oa);
                if oa >= target {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        curve,
        steps: opt.steps(),
        train_oa,
    })
}

/// Inference-mode class predictions, in sample order. Batches are evaluated independently,
/// so the result does not depend on the thread count.
pub fn predict(model: &Thsgr, samples: &[ModalSample], batch_size: usize) -> Result<Vec<usize>> {
    let refs: Vec<&ModalSample> = samples.iter().collect();
    let chunks: Vec<Vec<usize>> = refs
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let (batch, _) = to_batch(chunk)?;
            model.predict(&batch)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

pub fn evaluate(model: &Thsgr, samples: &[ModalSample], batch_size: usize) -> Result<EvalReport> {
    let pred = predict(model, samples, batch_size)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(EvalReport::new(Confusion::from_pairs(
        model.config.classes,
        &truth,
        &pred,
    )?))
}
