//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its forward
//! value and whatever it needs for the backward pass. Node ids are assigned in
//! recording order, so inputs always precede outputs and [`Graph::backward`]
//! simply walks the tape in reverse. A fresh graph is built per forward pass.

mod conv;
pub mod flops;
mod gradcheck;
mod kernels;

pub use conv::ConvGeom;
pub use gradcheck::{grad_check, grad_check_at, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Expand(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Sum(Var),
    Mean(Var, usize),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var, usize),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Expand(..) => "expand",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Conv { .. } => "conv",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::BatchNorm { .. } => "batch_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for updating running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one element per channel).
    pub var: Vec<f64>,
}

/// Computation tape with a per-graph FLOP counter.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    flops: u64,
    first_non_finite: Option<usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs accumulated by every op recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if the node received any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Sign of every leaky-relu input recorded so far, in tape order.
    ///
    /// Two evaluations of the same function with equal patterns lie on the same
    /// linear piece of every kink.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut signs = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu(a, _) = node.op {
                signs.extend(self.v(a).data().iter().map(|&x| x >= 0.0));
            }
        }
        signs
    }

    /// Fails with the first op whose output contained NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(node) => Err(Error::NonFinite {
                op: self.nodes[node].op.name(),
                node,
            }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], cost: u64) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(id);
        }
        self.flops += cost;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[], 0)
    }

    /// Records a leaf that receives a gradient on backward.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, &[], 0);
        self.nodes[v.0].requires_grad = true;
        v
    }

    fn v(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- elementwise and broadcasting -------------------------------------------------

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.v(a), self.v(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok(Tensor::from_parts(shape, data));
        }
        let ia = broadcast_index(ta.shape(), &shape);
        let ib = broadcast_index(tb.shape(), &shape);
        let data = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Elementwise sum with size-1 broadcasting (operands must have equal rank).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        let cost = flops::ELEMENTWISE * out.numel() as u64;
        Ok(self.push(out, Op::Add(a, b), &[a, b], cost))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        let cost = flops::ELEMENTWISE * out.numel() as u64;
        Ok(self.push(out, Op::Sub(a, b), &[a, b], cost))
    }

    /// Hadamard product with size-1 broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        let cost = flops::ELEMENTWISE * out.numel() as u64;
        Ok(self.push(out, Op::Mul(a, b), &[a, b], cost))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.v(a).map(|x| x * c);
        let cost = flops::ELEMENTWISE * out.numel() as u64;
        self.push(out, Op::Scale(a, c), &[a], cost)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.v(a).map(|x| x + c);
        let cost = flops::ELEMENTWISE * out.numel() as u64;
        self.push(out, Op::AddScalar(a), &[a], cost)
    }

    /// Broadcasts size-1 axes of `a` up to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.v(a);
        if broadcast_shape(ta.shape(), shape).as_deref() != Some(shape) {
            return Err(Error::shape("expand", ta.shape(), shape));
        }
        let idx = broadcast_index(ta.shape(), shape);
        let data = idx.iter().map(|&i| ta.data()[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(out, Op::Expand(a), &[a], 0))
    }

    // ---- linear algebra and layout ------------------------------------------------------

    /// Matrix product over the last two axes. Accepts `[m,k]x[k,n]`, `[B,m,k]x[B,k,n]`
    /// and `[B,m,k]x[k,n]` (right operand shared across the batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.v(a), self.v(b));
        let dims = MatDims::resolve(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        for bi in 0..dims.batch {
            kernels::gemm_nn(
                &ta.data()[dims.a_off(bi)..],
                &tb.data()[dims.b_off(bi)..],
                &mut out[bi * dims.m * dims.n..][..dims.m * dims.n],
                dims.m,
                dims.k,
                dims.n,
            );
        }
        let cost = flops::PER_MAC * (dims.batch * dims.m * dims.k * dims.n) as u64;
        let out = Tensor::from_parts(dims.out_shape(), out);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b], cost))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.v(a);
        let mut seen = vec![false; ta.rank()];
        if perm.len() != ta.rank()
            || perm
                .iter()
                .any(|&p| p >= ta.rank() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", ta.shape(), perm));
        }
        let out = kernels::permute(ta, perm);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a], 0))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.v(a).rank()).collect();
        if d0 >= perm.len() || d1 >= perm.len() {
            return Err(Error::shape("transpose", self.shape(a), &[d0, d1]));
        }
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.v(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a], 0))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.v(*parts
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?);
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", first.shape(), &[axis]));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &p in parts {
            let s = self.v(p).shape();
            if s.len() != rank || (0..rank).any(|d| d != axis && s[d] != first.shape()[d]) {
                return Err(Error::shape("concat", first.shape(), s));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.v(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts, 0))
    }

    // ---- reductions ---------------------------------------------------------------------

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let t = self.v(a);
        let cost = flops::REDUCE * t.numel() as u64;
        let out = Tensor::scalar(t.sum());
        self.push(out, Op::Sum(a), &[a], cost)
    }

    /// Mean along `axis`, keeping it as a size-1 axis.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.v(a);
        if axis >= t.rank() {
            return Err(Error::shape("mean", t.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..][..inner];
                for (d, s) in data[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let cost = flops::REDUCE * t.numel() as u64;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Mean(a, axis), &[a], cost))
    }

    // ---- convolution ----------------------------------------------------------------------

    /// Grouped convolution; spatial rank (1..=3) is inferred from `x`.
    /// `x: [B, Cin, *spatial]`, `w: [Cout, Cin/groups, *kernel]`, `b: [Cout]`.
    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: &[usize],
        padding: &[usize],
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::resolve(self.shape(x), self.shape(w), stride, padding, groups)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape("conv bias", self.shape(b), &[geom.cout]));
            }
        }
        let data = conv::forward(
            &geom,
            self.v(x).data(),
            self.v(w).data(),
            b.map(|b| self.v(b).data()),
        );
        let outputs = (geom.batch * geom.cout * geom.out_plane()) as u64;
        let mut cost =
            flops::PER_MAC * outputs * (geom.cin_per_group() * geom.kernel_volume()) as u64;
        if b.is_some() {
            cost += flops::BIAS_ADD * outputs;
        }
        let out = Tensor::from_parts(geom.output_shape(), data);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &inputs, cost))
    }

    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        self.expect_rank("conv1d", x, 3)?;
        self.conv(x, w, b, &[stride], &[padding], groups)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: [usize; 2],
    ) -> Result<Var> {
        self.expect_rank("conv2d", x, 4)?;
        self.conv(x, w, b, &[stride; 2], &padding, 1)
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: [usize; 3],
    ) -> Result<Var> {
        self.expect_rank("conv3d", x, 5)?;
        self.conv(x, w, b, &[stride; 3], &padding, 1)
    }

    fn expect_rank(&self, op: &'static str, x: Var, rank: usize) -> Result<()> {
        if self.v(x).rank() != rank {
            return Err(Error::shape(op, self.shape(x), &vec![0; rank]));
        }
        Ok(())
    }

    // ---- nonlinearities -------------------------------------------------------------------

    /// `x` for `x >= 0`, `x / alpha` otherwise; `alpha` must exceed 1.
    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 1.0) {
            return Err(Error::Param(format!(
                "leaky_relu alpha must be > 1, got {alpha}"
            )));
        }
        let out = self.v(a).map(|x| if x >= 0.0 { x } else { x / alpha });
        let cost = flops::LEAKY_RELU * out.numel() as u64;
        Ok(self.push(out, Op::LeakyRelu(a, alpha), &[a], cost))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.v(a).map(sigmoid);
        let cost = flops::SIGMOID * out.numel() as u64;
        self.push(out, Op::Sigmoid(a), &[a], cost)
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.v(a).map(gelu);
        let cost = flops::GELU * out.numel() as u64;
        self.push(out, Op::Gelu(a), &[a], cost)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.v(a);
        if axis >= t.rank() {
            return Err(Error::shape("softmax", t.shape(), &[axis]));
        }
        let out = kernels::softmax(t, axis);
        let cost = flops::SOFTMAX * out.numel() as u64;
        Ok(self.push(out, Op::Softmax(a, axis), &[a], cost))
    }

    // ---- normalization and loss -----------------------------------------------------------

    /// Training-mode batch norm over every axis except axis 1 (channels).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (c, count) = self.bn_check(x, gamma, beta)?;
        let t = self.v(x);
        let per = bn_planes(t.shape());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for_each_bn_plane(t.shape(), |ch, off| {
            mean[ch] += t.data()[off..off + per].iter().sum::<f64>();
        });
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for_each_bn_plane(t.shape(), |ch, off| {
            var[ch] += t.data()[off..off + per]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        });
        let biased: Vec<f64> = var.iter().map(|v| v / count as f64).collect();
        let unbiased: Vec<f64> = if count > 1 {
            var.iter().map(|v| v / (count - 1) as f64).collect()
        } else {
            biased.clone()
        };
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let v = self.bn_apply(x, gamma, beta, &mean, inv_std, true);
        Ok((
            v,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (c, _) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm running stats",
                &[running_mean.len(), running_var.len()],
                &[c, c],
            ));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean, inv_std, false))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", s, &[0, 0]));
        }
        let c = s[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", s, self.shape(p)));
            }
        }
        Ok((c, s.iter().product::<usize>() / c))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
    ) -> Var {
        let t = self.v(x);
        let (g, bt) = (self.v(gamma).data(), self.v(beta).data());
        let per = bn_planes(t.shape());
        let mut xhat = vec![0.0; t.numel()];
        let mut out = vec![0.0; t.numel()];
        for_each_bn_plane(t.shape(), |ch, off| {
            for i in off..off + per {
                let h = (t.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g[ch] * h + bt[ch];
            }
        });
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let cost = flops::BATCH_NORM * out.numel() as u64;
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
            cost,
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`; `logits: [B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.v(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[labels.len()]));
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let probs = kernels::softmax(t, 1).into_data();
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &t.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let out = Tensor::scalar(loss / b as f64);
        let cost = flops::CROSS_ENTROPY * (b * c) as u64;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            cost,
        ))
    }

    // ---- backward -------------------------------------------------------------------------

    /// Back-propagates from a scalar `loss`, accumulating gradients on every node that
    /// depends on a gradient leaf. Gradients from repeated uses add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.v(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[id].take() else {
                continue;
            };
            self.backward_node(id, &gy);
            self.grads[id] = Some(gy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&mut self, id: usize, gy: &[f64]) {
        let node = &self.nodes[id];
        let out_shape = node.value.shape().to_vec();
        let mut pending: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let ga = reduce_to(gy, &out_shape, self.shape(*a));
                let gb = reduce_to(gy, &out_shape, self.shape(*b));
                pending.push((*a, ga));
                pending.push((*b, gb.into_iter().map(|v| sign * v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.v(*a), self.v(*b));
                let ia = broadcast_index(ta.shape(), &out_shape);
                let ib = broadcast_index(tb.shape(), &out_shape);
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                for (k, &g) in gy.iter().enumerate() {
                    ga[ia[k]] += g * tb.data()[ib[k]];
                    gb[ib[k]] += g * ta.data()[ia[k]];
                }
                pending.push((*a, ga));
                pending.push((*b, gb));
            }
            Op::Scale(a, c) => pending.push((*a, gy.iter().map(|g| g * c).collect())),
            Op::AddScalar(a) | Op::Reshape(a) => pending.push((*a, gy.to_vec())),
            Op::Expand(a) => pending.push((*a, reduce_to(gy, &out_shape, self.shape(*a)))),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.v(*a), self.v(*b));
                let dims = MatDims::resolve(ta.shape(), tb.shape()).expect("validated in forward");
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                let (m, k, n) = (dims.m, dims.k, dims.n);
                for bi in 0..dims.batch {
                    let gyb = &gy[bi * m * n..][..m * n];
                    kernels::gemm_nt(
                        gyb,
                        &tb.data()[dims.b_off(bi)..],
                        &mut ga[dims.a_off(bi)..][..m * k],
                        m,
                        n,
                        k,
                    );
                    kernels::gemm_tn(
                        &ta.data()[dims.a_off(bi)..],
                        gyb,
                        &mut gb[dims.b_off(bi)..][..k * n],
                        m,
                        k,
                        n,
                    );
                }
                pending.push((*a, ga));
                pending.push((*b, gb));
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let g = kernels::permute(&Tensor::from_parts(out_shape, gy.to_vec()), &inv);
                pending.push((*a, g.into_data()));
            }
            Op::Concat(parts, axis) => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut bufs: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(self.v(*p).numel()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (p, buf) in parts.iter().zip(bufs.iter_mut()) {
                        let chunk = self.shape(*p)[*axis] * inner;
                        buf.extend_from_slice(&gy[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                pending.extend(parts.iter().copied().zip(bufs));
            }
            Op::Sum(a) => pending.push((*a, vec![gy[0]; self.v(*a).numel()])),
            Op::Mean(a, axis) => {
                let s = self.shape(*a);
                let (outer, len, inner) = split_axis(s, *axis);
                let inv = 1.0 / len as f64;
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            g[(o * len + l) * inner + i] = gy[o * inner + i] * inv;
                        }
                    }
                }
                pending.push((*a, g));
            }
            Op::Conv { x, w, b, geom } => {
                if self.nodes[x.0].requires_grad {
                    pending.push((*x, conv::backward_input(geom, gy, self.v(*w).data())));
                }
                if self.nodes[w.0].requires_grad {
                    pending.push((*w, conv::backward_weight(geom, gy, self.v(*x).data())));
                }
                if let Some(b) = b {
                    pending.push((*b, conv::backward_bias(geom, gy)));
                }
            }
            Op::LeakyRelu(a, alpha) => {
                let x = self.v(*a).data();
                let g = gy
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x >= 0.0 { *g } else { g / alpha })
                    .collect();
                pending.push((*a, g));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                pending.push((
                    *a,
                    gy.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                ));
            }
            Op::Gelu(a) => {
                let x = self.v(*a).data();
                pending.push((
                    *a,
                    gy.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect(),
                ));
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(&out_shape, *axis);
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| gy[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            g[idx(l)] = y[idx(l)] * (gy[idx(l)] - dot);
                        }
                    }
                }
                pending.push((*a, g));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = out_shape[1];
                let per = bn_planes(&out_shape);
                let count = (out_shape.iter().product::<usize>() / c) as f64;
                let gam = self.v(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for_each_bn_plane(&out_shape, |ch, off| {
                    for i in off..off + per {
                        dgamma[ch] += gy[i] * xhat[i];
                        dbeta[ch] += gy[i];
                    }
                });
                let mut dx = vec![0.0; gy.len()];
                if *train {
                    // dx = gamma*inv_std/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
                    for_each_bn_plane(&out_shape, |ch, off| {
                        let k = gam[ch] * inv_std[ch] / count;
                        for i in off..off + per {
                            dx[i] = k * (count * gy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    });
                } else {
                    for_each_bn_plane(&out_shape, |ch, off| {
                        for i in off..off + per {
                            dx[i] = gy[i] * gam[ch] * inv_std[ch];
                        }
                    });
                }
                pending.push((*x, dx));
                pending.push((*gamma, dgamma));
                pending.push((*beta, dbeta));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = gy[0] / b as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * c + l] -= scale;
                }
                pending.push((*logits, g));
            }
        }
        for (v, g) in pending {
            self.accumulate(v, g);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * pdf
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn bn_planes(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

/// Visits each `(channel, offset)` plane of a `[B, C, ...]` tensor.
fn for_each_bn_plane(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let (b, c, per) = (shape[0], shape[1], bn_planes(shape));
    for bi in 0..b {
        for ch in 0..c {
            f(ch, (bi * c + ch) * per);
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For every element of `out`, the flat offset of the element of `src` it reads.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    if src == out {
        return (0..numel).collect();
    }
    let src_strides = strides_of(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut idx = Vec::with_capacity(numel);
    let mut counter = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        idx.push(off);
        for ax in (0..out.len()).rev() {
            counter[ax] += 1;
            off += eff[ax];
            if counter[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

/// Sums a gradient of shape `out` down to a broadcast source of shape `src`.
fn reduce_to(g: &[f64], out: &[usize], src: &[usize]) -> Vec<f64> {
    if src == out {
        return g.to_vec();
    }
    let idx = broadcast_index(src, out);
    let mut r = vec![0.0; src.iter().product()];
    for (k, &i) in idx.iter().enumerate() {
        r[i] += g[k];
    }
    r
}

struct MatDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}

impl MatDims {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::shape("matmul", a, b);
        let (batch, a_batched, m, k) = match *a {
            [m, k] => (1, false, m, k),
            [bt, m, k] => (bt, true, m, k),
            _ => return Err(err()),
        };
        let (b_batched, k2, n) = match *b {
            [k2, n] => (false, k2, n),
            [bt, k2, n] if a_batched && bt == batch => (true, k2, n),
            _ => return Err(err()),
        };
        if k != k2 {
            return Err(err());
        }
        Ok(Self {
            batch,
            a_batched,
            b_batched,
            m,
            k,
            n,
        })
    }

    fn a_off(&self, bi: usize) -> usize {
        if self.a_batched {
            bi * self.m * self.k
        } else {
            0
        }
    }

    fn b_off(&self, bi: usize) -> usize {
        if self.b_batched {
            bi * self.k * self.n
        } else {
            0
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.a_batched {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}
