//! Finite-difference gradient checks for every model block and the end-to-end model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_at, GradCheckReport, Graph, Var};
use crate::error::Result;
use crate::model::{
    Batch, ClassifierHead, GraphEncoder, HsiBranch, MeanForward, ModelConfig, Modulator,
    PatchEmbedding, SarBranch, Thsgr,
};
use crate::nn::{Forward, Mode, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub block: &'static str,
    /// Input index (`input0`, ...) or parameter name.
    pub target: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct CheckSettings {
    pub seed: u64,
    pub step: f64,
    pub tol: f64,
    /// Upper bound on perturbed coordinates per tensor; larger tensors are strided.
    pub coords_per_tensor: usize,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            step: STEP,
            tol: TOLERANCE,
            coords_per_tensor: 24,
        }
    }
}

type BlockFn<'a> = Box<dyn Fn(&mut Forward, &[Var]) -> Result<Var> + 'a>;

struct Case<'a> {
    block: &'static str,
    store: &'a ParamStore,
    inputs: Vec<Tensor>,
    differentiable_inputs: usize,
    run: BlockFn<'a>,
}

fn strided(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        (0..numel).collect()
    } else {
        (0..max)
            .map(|i| i * numel / max + (numel / max) / 2)
            .collect()
    }
}

impl Case<'_> {
    /// Runs the block with one tensor swapped for `var`; non-scalar outputs are contracted
    /// against a fixed random tensor.
    fn scalar(
        &self,
        g: &mut Graph,
        target: Target,
        var: Var,
        weights: Option<&Tensor>,
    ) -> Result<Var> {
        let inputs: Vec<Var> = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, t)| match target {
                Target::Input(j) if i == j => var,
                _ => g.constant(t.clone()),
            })
            .collect();
        let mut fw = Forward::new(g, self.store, Mode::Train).without_grads();
        if let Target::Param(id) = target {
            fw = fw.with_override(id, var);
        }
        let out = (self.run)(&mut fw, &inputs)?;
        drop(fw);
        match weights {
            None => Ok(out),
            Some(w) => {
                let wv = g.constant(w.clone());
                let prod = g.mul(out, wv)?;
                Ok(g.sum(prod))
            }
        }
    }

    fn check(&self, s: &CheckSettings, rng: &mut ChaCha8Rng) -> Result<Vec<BlockCheck>> {
        let mut probe = Graph::new();
        let first = probe.constant(self.inputs[0].clone());
        let out = self.scalar(&mut probe, Target::Input(0), first, None)?;
        let shape = probe.shape(out).to_vec();
        let weights = (!shape.is_empty()).then(|| Tensor::randn(&shape, 1.0, rng));

        let mut targets: Vec<(String, Target, Tensor)> = (0..self.differentiable_inputs)
            .map(|i| {
                (
                    format!("input{i}"),
                    Target::Input(i),
                    self.inputs[i].clone(),
                )
            })
            .collect();
        for (id, p) in self.store.iter().filter(|(_, p)| p.trainable) {
            targets.push((p.name.clone(), Target::Param(id), p.value.clone()));
        }
        targets
            .into_iter()
            .map(|(name, target, value)| {
                let coords = strided(value.numel(), s.coords_per_tensor);
                let report = grad_check_at(
                    |g, v| self.scalar(g, target, v, weights.as_ref()),
                    &value,
                    &coords,
                    s.step,
                    s.tol,
                )?;
                Ok(BlockCheck {
                    block: self.block,
                    target: name,
                    report,
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy)]
enum Target {
    Input(usize),
    Param(ParamId),
}

/// The small configuration the checks run at: 7x7 patches, 16 components, width 16, 3 classes.
pub fn check_config() -> ModelConfig {
    ModelConfig::toy(16, 2, 3)
}

/// Checks, in order: hsi_branch, sar_branch, graph_representation, patch_to_embedding,
/// modulator_forward, mean_forward, classify_head, cross_entropy, end_to_end.
pub fn run_grad_checks(s: &CheckSettings) -> Result<Vec<BlockCheck>> {
    let cfg = check_config();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let (b, k, d, n) = (2, cfg.patch, cfg.dim, cfg.tokens());
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let hsi = HsiBranch::new(&mut store, &cfg, &mut rng)?;
    let case = Case {
        block: "hsi_branch",
        store: &store,
        inputs: vec![Tensor::randn(&[b, 1, cfg.pcs, k, k], 1.0, &mut rng)],
        differentiable_inputs: 1,
        run: Box::new(|fw, x| hsi.forward(fw, x[0])),
    };
    out.extend(case.check(s, &mut rng)?);

    let mut store = ParamStore::new();
    let sar = SarBranch::new(&mut store, &cfg, &mut rng);
    let case = Case {
        block: "sar_branch",
        store: &store,
        inputs: vec![Tensor::randn(&[b, cfg.aux_bands, k, k], 1.0, &mut rng)],
        differentiable_inputs: 1,
        run: Box::new(|fw, x| sar.forward(fw, x[0])),
    };
    out.extend(case.check(s, &mut rng)?);

    let mut store = ParamStore::new();
    let graph = GraphEncoder::new(&mut store, k, cfg.fused, &mut rng);
    let case = Case {
        block: "graph_representation",
        store: &store,
        inputs: vec![
            Tensor::randn(&[b, cfg.fused, k, k], 0.5, &mut rng),
            Tensor::randn(&[b, cfg.fused, k, k], 0.5, &mut rng),
        ],
        differentiable_inputs: 2,
        run: Box::new(|fw, x| Ok(graph.forward(fw, x[0], x[1])?.g)),
    };
    out.extend(case.check(s, &mut rng)?);

    let mut store = ParamStore::new();
    let embed = PatchEmbedding::new(&mut store, n, cfg.fused, d, &mut rng);
    let case = Case {
        block: "patch_to_embedding",
        store: &store,
        inputs: vec![Tensor::randn(&[b, cfg.fused, k, k], 1.0, &mut rng)],
        differentiable_inputs: 1,
        run: Box::new(|fw, x| embed.forward(fw, x[0])),
    };
    out.extend(case.check(s, &mut rng)?);

    let tokens = Tensor::randn(&[b, n + 1, d], 1.0, &mut rng);
    let mut store = ParamStore::new();
    let modulator = Modulator::new(&mut store, d, &mut rng);
    let case = Case {
        block: "modulator_forward",
        store: &store,
        inputs: vec![tokens.clone()],
        differentiable_inputs: 1,
        run: Box::new(|fw, x| modulator.forward(fw, x[0])),
    };
    out.extend(case.check(s, &mut rng)?);

    let mut store = ParamStore::new();
    let mean_forward = MeanForward::new(&mut store, d, cfg.hidden, &mut rng);
    let case = Case {
        block: "mean_forward",
        store: &store,
        inputs: vec![tokens.clone()],
        differentiable_inputs: 1,
        run: Box::new(|fw, x| mean_forward.forward(fw, x[0])),
    };
    out.extend(case.check(s, &mut rng)?);

    let mut store = ParamStore::new();
    let head = ClassifierHead::new(&mut store, d, cfg.classes, &mut rng);
    let case = Case {
        block: "classify_head",
        store: &store,
        inputs: vec![tokens],
        differentiable_inputs: 1,
        run: Box::new(|fw, x| head.forward(fw, x[0])),
    };
    out.extend(case.check(s, &mut rng)?);

    let store = ParamStore::new();
    let labels = [0, 2, 1, 2];
    let case = Case {
        block: "cross_entropy",
        store: &store,
        inputs: vec![Tensor::randn(&[labels.len(), cfg.classes], 1.5, &mut rng)],
        differentiable_inputs: 1,
        run: Box::new(|fw, x| fw.graph.cross_entropy(x[0], &labels)),
    };
    out.extend(case.check(s, &mut rng)?);

    let model = Thsgr::new(cfg.clone(), s.seed)?;
    let labels = [1, 0];
    let case = Case {
        block: "end_to_end",
        store: &model.store,
        inputs: vec![
            Tensor::uniform(&[b, 1, cfg.pcs, k, k], 1.0, &mut rng),
            Tensor::uniform(&[b, cfg.aux_bands, k, k], 1.0, &mut rng),
        ],
        differentiable_inputs: 0,
        run: Box::new(|fw, x| {
            let batch = Batch {
                hsi: fw.graph.value(x[0]).clone(),
                aux: fw.graph.value(x[1]).clone(),
            };
            let trace = model.forward(fw, &batch)?;
            fw.graph.cross_entropy(trace.logits, &labels)
        }),
    };
    out.extend(case.check(s, &mut rng)?);
    Ok(out)
}
