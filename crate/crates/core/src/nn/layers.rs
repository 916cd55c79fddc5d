use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Forward, Mode, ParamId, ParamStore, StatUpdate};

/// Convolution with weights `[cout, cin/groups, *kernel]` and optional bias.
///
/// Weights and bias are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        padding: &[usize],
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin / groups) * kernel.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut shape = vec![cout, cin / groups];
        shape.extend_from_slice(kernel);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&shape, bound, rng),
        );
        let bias =
            bias.then(|| store.add(format!("{name}.bias"), Tensor::uniform(&[cout], bound, rng)));
        Self {
            weight,
            bias,
            stride: vec![1; kernel.len()],
            padding: padding.to_vec(),
            groups,
        }
    }

    /// "Same" padding (`k / 2` per axis) at stride 1.
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        rng: &mut R,
    ) -> Self {
        let pad: Vec<usize> = kernel.iter().map(|k| k / 2).collect();
        Self::new(store, name, cin, cout, kernel, &pad, 1, true, rng)
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let w = fw.param(self.weight);
        let b = self.bias.map(|b| fw.param(b));
        fw.graph
            .conv(x, w, b, &self.stride, &self.padding, self.groups)
    }
}

/// Affine map on the last axis: `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[inputs, outputs], bound, rng),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::uniform(&[outputs], bound, rng),
            )
        });
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let shape = fw.graph.shape(x).to_vec();
        if shape.last() != Some(&self.inputs) || !(2..=3).contains(&shape.len()) {
            return Err(Error::shape("linear", &shape, &[self.inputs, self.outputs]));
        }
        let w = fw.param(self.weight);
        let y = fw.graph.matmul(x, w)?;
        match self.bias {
            None => Ok(y),
            Some(b) => {
                let b = fw.param(b);
                let mut bshape = vec![1; shape.len()];
                *bshape.last_mut().unwrap() = self.outputs;
                let b = fw.graph.reshape(b, &bshape)?;
                fw.graph.add(y, b)
            }
        }
    }
}

/// Batch normalization over channel axis 1 with learnable scale/shift.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        eps: f64,
        momentum: f64,
    ) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store
                .add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            eps,
            momentum,
        }
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let gamma = fw.param(self.gamma);
        let beta = fw.param(self.beta);
        match fw.mode {
            Mode::Train => {
                let (y, stats) = fw.graph.batch_norm_train(x, gamma, beta, self.eps)?;
                fw.record_stats(StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    momentum: self.momentum,
                    mean: stats.mean,
                    var: stats.var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = fw.store();
                let rm = store.get(self.running_mean).data().to_vec();
                let rv = store.get(self.running_var).data().to_vec();
                fw.graph.batch_norm_eval(x, gamma, beta, &rm, &rv, self.eps)
            }
        }
    }
}
