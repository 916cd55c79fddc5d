//! Mean-forward block, classification head and loss.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Forward, Linear, ParamStore};

/// Feed-forward `f(gelu(f(x)))` followed by pulling each token halfway toward the
/// per-sample token mean.
#[derive(Clone, Debug)]
pub struct MeanForward {
    pub expand: Linear,
    pub contract: Linear,
}

impl MeanForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            expand: Linear::new(store, "mean_forward.fc1", dim, hidden, true, rng),
            contract: Linear::new(store, "mean_forward.fc2", hidden, dim, true, rng),
        }
    }

    /// `x: [B, T, D]` -> `[B, T, D]`.
    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let h = self.expand.forward(fw, x)?;
        let h = fw.graph.gelu(h);
        let o6 = self.contract.forward(fw, h)?;
        mean_mix(fw.graph, o6)
    }
}

/// `out_i = 0.5 * (mean_j x_j + x_i)` over the token axis (axis 1) of `[B, T, D]`.
pub fn mean_mix(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("mean_forward", &s, &[0, 0, 0]));
    }
    let avg = g.mean(x, 1)?;
    let sum = g.add(x, avg)?;
    Ok(g.scale(sum, 0.5))
}

/// Token-averaged features mapped linearly to class logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc: Linear::new(store, "head.fc", dim, classes, true, rng),
        }
    }

    /// `tokens: [B, T, D]` -> logits `[B, classes]`.
    pub fn forward(&self, fw: &mut Forward, tokens: Var) -> Result<Var> {
        let s = fw.graph.shape(tokens).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("classify_head", &s, &[0, 0, self.fc.inputs]));
        }
        let pooled = fw.graph.mean(tokens, 1)?;
        let pooled = fw.graph.reshape(pooled, &[s[0], s[2]])?;
        self.fc.forward(fw, pooled)
    }
}

/// 0-indexed one-hot target.
pub fn one_hot(label: usize, classes: usize) -> Result<Vec<f64>> {
    if label >= classes {
        return Err(Error::Data(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    Ok(v)
}

/// Mean cross-entropy of softmax(logits) against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}
