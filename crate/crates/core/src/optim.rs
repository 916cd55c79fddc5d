//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let c = &config;
        if !(c.lr > 0.0 && c.lr.is_finite()) {
            return Err(Error::config(
                "lr",
                format!("must be positive, got {}", c.lr),
            ));
        }
        if !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) {
            return Err(Error::config("beta", "betas must lie in [0, 1)"));
        }
        if !(c.eps > 0.0) || !(c.weight_decay >= 0.0) {
            return Err(Error::config(
                "eps",
                "eps must be positive and weight decay non-negative",
            ));
        }
        Ok(Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update over every `(param, grad)` pair. Non-trainable entries are rejected.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (id, grad) in grads {
            let p = store.param(*id);
            if !p.trainable {
                return Err(Error::Param(format!("{} is not trainable", p.name)));
            }
            if p.value.shape() != grad.shape() {
                return Err(Error::shape("adam_step", p.value.shape(), grad.shape()));
            }
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| vec![0.0; grad.numel()]);
            let v = self.second[i].get_or_insert_with(|| vec![0.0; grad.numel()]);
            let w = store.get_mut(*id).data_mut();
            for (((w, g), m), v) in w
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w = *w * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
