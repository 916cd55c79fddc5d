//! Parameter storage and the layers model blocks are assembled from.

mod layers;

pub use layers::{BatchNorm, Conv, Linear};

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers such as batch-norm running statistics are stored here too but never trained.
    pub trainable: bool,
}

/// Flat registry of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn count_trainable(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel() as u64)
            .sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> u64 {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.value.numel() as u64)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update recorded by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One forward pass: binds parameters to graph leaves on first use.
pub struct Forward<'a> {
    pub graph: &'a mut Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    overrides: Vec<(ParamId, Var)>,
    pub mode: Mode,
    stat_updates: Vec<StatUpdate>,
    track_grads: bool,
}

impl<'a> Forward<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            graph,
            store,
            bound: vec![None; store.len()],
            overrides: Vec::new(),
            mode,
            stat_updates: Vec::new(),
            track_grads: true,
        }
    }

    /// Parameters enter the graph as constants (inference only).
    pub fn without_grads(mut self) -> Self {
        self.track_grads = false;
        self
    }

    /// Uses `var` in place of the stored value of `id` (for gradient checks).
    pub fn with_override(mut self, id: ParamId, var: Var) -> Self {
        self.overrides.push((id, var));
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = if let Some(&(_, v)) = self.overrides.iter().find(|(p, _)| *p == id) {
            v
        } else {
            let t = self.store.get(id).clone();
            if self.track_grads && self.store.param(id).trainable {
                self.graph.leaf(t)
            } else {
                self.graph.constant(t)
            }
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// `(param, leaf)` pairs for every trainable parameter used so far.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .filter(|(id, _)| self.store.param(*id).trainable)
            .collect()
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }
}

/// Applies exponential-moving-average updates `r <- (1 - m) r + m batch`.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.mean), (u.running_var, &u.var)] {
            let r = store.get_mut(id);
            for (rv, bv) in r.data_mut().iter_mut().zip(batch) {
                *rv = (1.0 - u.momentum) * *rv + u.momentum * bv;
            }
        }
    }
}
