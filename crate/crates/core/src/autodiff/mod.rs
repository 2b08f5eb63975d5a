//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append a node holding their output value and the operand handles needed by
//! the backward rule; [`Tape::backward`] replays the nodes in reverse order.
//! Nodes are appended only after their operands exist, so the tape is always
//! in topological order.

pub mod conv;
mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use conv::ConvGeometry;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How batch normalization obtains its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the supplied running statistics; per-sample and deterministic.
    Frozen,
}

/// Per-channel running mean and variance tracked across training batches.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average update: `running = (1 - momentum) * running + momentum * batch`.
    pub fn absorb(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.unbiased_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Statistics observed by a train-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        mode: NormMode,
        stats: Option<BatchStats>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Sigmoid {
        input: Var,
    },
    BceLoss {
        logits: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    #[cfg(debug_assertions)]
    fn operands(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![input, kernel, bias],
            Op::Relu { input }
            | Op::Sum { input }
            | Op::GlobalAvgPool { input }
            | Op::Sigmoid { input } => vec![input],
            Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::BatchNorm {
                input, scale, shift, ..
            } => vec![input, scale, shift],
            Op::Dense {
                input, weight, bias, ..
            } => vec![input, weight, bias],
            Op::BceLoss { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Numerically stable logistic function, kept strictly inside (0, 1).
pub fn stable_sigmoid(x: f64) -> f64 {
    const UPPER: f64 = 1.0 - f64::EPSILON / 2.0;
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, UPPER)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf tensor. Leaves with `requires_grad` receive a gradient on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a `requires_grad` leaf.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0)?.as_deref()
    }

    /// Batch statistics observed by a train-mode batch-norm output.
    pub fn batch_stats(&self, var: Var) -> Option<&BatchStats> {
        match &self.nodes[var.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        #[cfg(debug_assertions)]
        {
            // Beyond this magnitude overflow is the arithmetic's fault, not the op's
            // (a diverging run); below it no op here can produce inf or NaN.
            const TAME: f64 = 1e150;
            let operands_tame = op.operands().iter().all(|v| {
                self.nodes[v.0]
                    .value
                    .data()
                    .iter()
                    .all(|x| x.abs() <= TAME)
            });
            debug_assert!(
                matches!(op, Op::Leaf) || !operands_tame || value.all_finite(),
                "non-finite output from finite operands in {op:?}"
            );
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geometry = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if self.shape(bias) != [geometry.out_channels] {
            return Err(Error::shape(format!(
                "conv2d bias must be [{}], got {:?}",
                geometry.out_channels,
                self.shape(bias)
            )));
        }
        let out = conv::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(geometry.output_shape().to_vec(), out)?;
        let rg = self.any_requires_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        // not `max`, which would turn NaN into 0
        let data = x.data().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        let rg = self.any_requires_grad(&[input]);
        self.push(value, rg, Op::Relu { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{name} expects identical shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(value, rg, op(a, b)))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        let rg = self.any_requires_grad(&[input]);
        self.push(Tensor::scalar(total), rg, Op::Sum { input })
    }

    /// Per-channel batch normalization of an `[N, C, H, W]` tensor followed by
    /// the affine map `scale * x_hat + shift`.
    ///
    /// In [`NormMode::Train`] the batch statistics are used and recorded on the
    /// node (see [`Tape::batch_stats`]); `running` is ignored. In
    /// [`NormMode::Frozen`] `running` supplies mean and variance.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running: &RunningStats,
        mode: NormMode,
        epsilon: f64,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!("batch_norm input must be [N,C,H,W], got {shape:?}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::config("batch_norm epsilon must be positive"));
        }
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(format!(
                    "batch_norm {name} must be [{c}], got {:?}",
                    self.shape(v)
                )));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape(format!("batch_norm running stats must have {c} channels")));
        }

        let x = self.value(input).data();
        let count = (n * plane) as f64;
        let channel_values = |ch: usize| {
            (0..n).flat_map(move |i| {
                let start = (i * c + ch) * plane;
                start..start + plane
            })
        };

        let (mean, var, stats) = match mode {
            NormMode::Frozen => (running.mean.clone(), running.var.clone(), None),
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let m = channel_values(ch).map(|k| x[k]).sum::<f64>() / count;
                    let v = channel_values(ch).map(|k| (x[k] - m).powi(2)).sum::<f64>() / count;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let stats = BatchStats {
                    mean: mean.clone(),
                    unbiased_var: var.iter().map(|v| v * correction).collect(),
                };
                (mean, var, Some(stats))
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            for k in channel_values(ch) {
                let xh = (x[k] - mean[ch]) * inv_std[ch];
                normalized[k] = xh;
                out[k] = gamma[ch] * xh + beta[ch];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_requires_grad(&[input, scale, shift]);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                scale,
                shift,
                normalized,
                inv_std,
                mode,
                stats,
            },
        ))
    }

    /// Mean over the spatial plane: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "global_avg_pool input must be [N,C,H,W], got {shape:?}"
            )));
        }
        let plane = shape[2] * shape[3];
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![shape[0], shape[1]], data)?;
        let rg = self.any_requires_grad(&[input]);
        Ok(self.push(value, rg, Op::GlobalAvgPool { input }))
    }

    /// Affine layer `x · weightᵀ + bias` with `x: [N, D]`, `weight: [C, D]`, `bias: [C]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(format!(
                "dense expects x [N,D], weight [C,D], bias [C]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (n, d, c) = (xs[0], xs[1], ws[0]);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            for j in 0..c {
                let wrow = &w[j * d..(j + 1) * d];
                out[i * c + j] = b[j] + row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.any_requires_grad(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::Dense { input, weight, bias }))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        let rg = self.any_requires_grad(&[input]);
        self.push(value, rg, Op::Sigmoid { input })
    }

    /// Mean-over-samples, sum-over-classes binary cross-entropy of `sigmoid(logits)`
    /// against binary `targets`, evaluated directly from the logits as
    /// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_loss(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 {
            return Err(Error::shape(format!("bce_loss logits must be [N,C], got {shape:?}")));
        }
        if targets.shape() != shape {
            return Err(Error::shape(format!(
                "bce_loss targets {:?} do not match logits {shape:?}",
                targets.shape()
            )));
        }
        if let Some((k, v)) = targets
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && v != 1.0)
        {
            return Err(Error::Validation(format!(
                "bce_loss targets must be 0 or 1, found {v} at flat index {k}"
            )));
        }
        let n = shape[0] as f64;
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let rg = self.any_requires_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            rg,
            Op::BceLoss {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    /// Propagates gradients from a scalar `loss` back to every `requires_grad` leaf.
    ///
    /// A tape supports exactly one backward pass. Leaves that do not influence
    /// the loss receive an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; double-backward is unsupported".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[idx].is_none() {
                self.grads[idx] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, var: Var, contribution: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut self.grads[var.0] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, idx: usize, up: &[f64]) {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let grads = conv::conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    up,
                    [rg(*input), rg(*kernel), rg(*bias)],
                );
                out.extend(grads.input.map(|g| (*input, g)));
                out.extend(grads.kernel.map(|g| (*kernel, g)));
                out.extend(grads.bias.map(|g| (*bias, g)));
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let g = x
                    .iter()
                    .zip(up)
                    .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
                    .collect();
                out.push((*input, g));
            }
            Op::Add { a, b } => {
                out.push((*a, up.to_vec()));
                out.push((*b, up.to_vec()));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, up.iter().zip(bv).map(|(u, y)| u * y).collect()));
                out.push((*b, up.iter().zip(av).map(|(u, x)| u * x).collect()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![up[0]; self.value(*input).numel()]));
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                normalized,
                inv_std,
                mode,
                ..
            } => {
                let shape = self.shape(*input);
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let gamma = self.value(*scale).data();
                let count = (n * plane) as f64;
                let mut dx = vec![0.0; up.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let idxs = || {
                        (0..n).flat_map(move |i| {
                            let s = (i * c + ch) * plane;
                            s..s + plane
                        })
                    };
                    let sum_up: f64 = idxs().map(|k| up[k]).sum();
                    let sum_up_xh: f64 = idxs().map(|k| up[k] * normalized[k]).sum();
                    dbeta[ch] = sum_up;
                    dgamma[ch] = sum_up_xh;
                    let g = gamma[ch] * inv_std[ch];
                    match mode {
                        NormMode::Frozen => {
                            for k in idxs() {
                                dx[k] = g * up[k];
                            }
                        }
                        NormMode::Train => {
                            for k in idxs() {
                                dx[k] = g
                                    * (up[k] - sum_up / count - normalized[k] * sum_up_xh / count);
                            }
                        }
                    }
                }
                out.push((*input, dx));
                out.push((*scale, dgamma));
                out.push((*shift, dbeta));
            }
            Op::GlobalAvgPool { input } => {
                let shape = self.shape(*input);
                let plane = shape[2] * shape[3];
                let g = up
                    .iter()
                    .flat_map(|&u| std::iter::repeat_n(u / plane as f64, plane))
                    .collect();
                out.push((*input, g));
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let (n, d) = (xs[0], xs[1]);
                let c = self.shape(*weight)[0];
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                if rg(*input) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..c {
                            let u = up[i * c + j];
                            for k in 0..d {
                                dx[i * d + k] += u * w[j * d + k];
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if rg(*weight) {
                    let mut dw = vec![0.0; c * d];
                    for i in 0..n {
                        for j in 0..c {
                            let u = up[i * c + j];
                            for k in 0..d {
                                dw[j * d + k] += u * x[i * d + k];
                            }
                        }
                    }
                    out.push((*weight, dw));
                }
                if rg(*bias) {
                    let mut db = vec![0.0; c];
                    for row in up.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(a, u)| *a += u);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                let g = y.iter().zip(up).map(|(&s, &u)| s * (1.0 - s) * u).collect();
                out.push((*input, g));
            }
            Op::BceLoss { logits, targets } => {
                let z = self.value(*logits).data();
                let n = self.shape(*logits)[0] as f64;
                let g = z
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (stable_sigmoid(z) - y) / n * up[0])
                    .collect();
                out.push((*logits, g));
            }
        }
        for (var, g) in out {
            self.accumulate(var, g);
        }
    }
}
