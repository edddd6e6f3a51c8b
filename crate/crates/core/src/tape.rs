//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its variables in execution
//! order. Because a node can only be created from variables that already exist,
//! the record is topologically sorted by construction and [`Tape::backward`]
//! simply walks it in reverse, visiting each node once.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Floor applied to every probability before it enters a logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(alpha) => {
                if x > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormParams {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormParams {
    fn default() -> Self {
        BatchNormParams {
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    /// Normalization by batch statistics; `xhat` and `inv_std` are saved for backward.
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Normalization by fixed running statistics.
    BatchNormFrozen {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Elementwise product with a constant mask (already scaled by 1/(1-rate)).
    Mask {
        input: Var,
        mask: Vec<f64>,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    /// `-mean[y ln p + (1-y) ln(1-p)]` with log arguments floored at [`PROB_FLOOR`].
    BinaryCrossEntropy {
        pred: Var,
        target: Vec<f64>,
    },
    SumOfSquares {
        inputs: Vec<Var>,
        lambda: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(&contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn nchw(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(shape_err!(
            "{what} expects a rank-4 [N,C,H,W] tensor, got {s:?}"
        )),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {var:?} is not recorded on this tape"
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    /// Records an input or parameter. Its `requires_grad` flag decides whether
    /// [`Tape::backward`] reports a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value.with_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.index].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let x = self.value(input);
        let k = self.value(kernel);
        let (n, c, h, w) = nchw(x, "conv2d input")?;
        let (o, kc, kh, kw) = nchw(k, "conv2d kernel")?;
        if kc != c {
            return Err(shape_err!(
                "conv2d: kernel in-channels {kc} != input channels {c}"
            ));
        }
        if self.value(bias).len() != o {
            return Err(shape_err!(
                "conv2d: bias length {} != out-channels {o}",
                self.value(bias).len()
            ));
        }
        let geom = ConvGeom::new(c, h, w, kh, kw, stride, padding).ok_or_else(|| {
            shape_err!("conv2d: kernel {kh}x{kw} exceeds padded input {h}x{w} (padding {padding})")
        })?;
        let y = kernels::conv2d_forward(x.data(), n, &geom, o, k.data(), self.value(bias).data());
        let value = Tensor::new(&[n, o, geom.oh, geom.ow], y)?;
        let rg = self.grad_of(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Transposed convolution with a `[C_in, C_out, kh, kw]` kernel.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d_transpose stride must be >= 1".into(),
            ));
        }
        let x = self.value(input);
        let k = self.value(kernel);
        let (n, ci, h, w) = nchw(x, "conv2d_transpose input")?;
        let (kci, co, kh, kw) = nchw(k, "conv2d_transpose kernel")?;
        if kci != ci {
            return Err(shape_err!(
                "conv2d_transpose: kernel in-channels {kci} != input channels {ci}"
            ));
        }
        if self.value(bias).len() != co {
            return Err(shape_err!(
                "conv2d_transpose: bias length {} != out-channels {co}",
                self.value(bias).len()
            ));
        }
        if kh < stride || kw < stride {
            return Err(Error::InvalidArgument(format!(
                "conv2d_transpose: kernel {kh}x{kw} smaller than stride {stride}"
            )));
        }
        let oh = (h - 1) as isize * stride as isize - 2 * padding as isize + kh as isize;
        let ow = (w - 1) as isize * stride as isize - 2 * padding as isize + kw as isize;
        if oh <= 0 || ow <= 0 {
            return Err(shape_err!(
                "conv2d_transpose: computed output size {oh}x{ow} is not positive"
            ));
        }
        let geom = ConvGeom::new(co, oh as usize, ow as usize, kh, kw, stride, padding)
            .filter(|g| g.oh == h && g.ow == w)
            .ok_or_else(|| shape_err!("conv2d_transpose: inconsistent geometry"))?;
        let y = kernels::conv_transpose_forward(
            x.data(),
            n,
            &geom,
            ci,
            k.data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(&[n, co, geom.h, geom.w], y)?;
        let rg = self.grad_of(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        for v in [input, weights, bias] {
            self.check(v)?;
        }
        let x = self.value(input);
        let wt = self.value(weights);
        let (n, f) = match *x.shape() {
            [n, f] => (n, f),
            ref s => return Err(shape_err!("dense input must be [N,F], got {s:?}")),
        };
        let (wf, g) = match *wt.shape() {
            [a, b] => (a, b),
            ref s => return Err(shape_err!("dense weights must be [F,G], got {s:?}")),
        };
        if wf != f {
            return Err(shape_err!("dense: input features {f} != weight rows {wf}"));
        }
        let b = self.value(bias);
        if b.len() != g {
            return Err(shape_err!("dense: bias length {} != outputs {g}", b.len()));
        }
        let mut y = Vec::with_capacity(n * g);
        for _ in 0..n {
            y.extend_from_slice(b.data());
        }
        kernels::gemm(n, f, g, x.data(), false, wt.data(), false, 1.0, &mut y);
        let value = Tensor::new(&[n, g], y)?;
        let rg = self.grad_of(&[input, weights, bias]);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weights,
                bias,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        self.check(input)?;
        if let Activation::LeakyRelu(alpha) = kind {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "leaky_relu slope {alpha} outside (0,1)"
                )));
            }
        }
        let value = self.value(input).map(|v| kind.apply(v));
        let rg = self.grad_of(&[input]);
        Ok(self.push(value, Op::Activation { input, kind }, rg))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, "maxpool2d")?;
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "maxpool2d window and stride must be >= 1".into(),
            ));
        }
        if window > h || window > w {
            return Err(shape_err!(
                "maxpool2d: window {window} larger than input {h}x{w}"
            ));
        }
        let (y, argmax) = kernels::maxpool_forward(x.data(), n * c, h, w, window, stride);
        let value = Tensor::new(
            &[n, c, (h - window) / stride + 1, (w - window) / stride + 1],
            y,
        )?;
        let rg = self.grad_of(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, "global_avg_pool")?;
        let plane = h * w;
        let y = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[n, c], y)?;
        let rg = self.grad_of(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool { input }, rg))
    }

    /// Batch normalization. In [`Mode::Train`] the batch statistics are used and
    /// folded into `stats` with an exponential moving average; in
    /// [`Mode::Infer`] `stats` is read only.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: Mode,
        params: BatchNormParams,
    ) -> Result<Var> {
        for v in [input, gamma, beta] {
            self.check(v)?;
        }
        if params.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(
                "batchnorm epsilon must be > 0".into(),
            ));
        }
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, "batchnorm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err!(
                "batchnorm: gamma/beta length differs from channels {c}"
            ));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err!(
                "batchnorm: running stats sized for {} channels, input has {c}",
                stats.mean.len()
            ));
        }
        let plane = h * w;
        let count = n * plane;
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut y = vec![0.0; x.len()];
        let rg = self.grad_of(&[input, gamma, beta]);
        match mode {
            Mode::Train => {
                let mut xhat = vec![0.0; x.len()];
                let mut inv_std = vec![0.0; c];
                let m = params.momentum;
                for ch in 0..c {
                    let mut sum = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        sum += x.data()[off..off + plane].iter().sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        sq += x.data()[off..off + plane]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let is = 1.0 / (var + params.epsilon).sqrt();
                    inv_std[ch] = is;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            let xh = (x.data()[i] - mean) * is;
                            xhat[i] = xh;
                            y[i] = gm[ch] * xh + bt[ch];
                        }
                    }
                    stats.mean[ch] = m * stats.mean[ch] + (1.0 - m) * mean;
                    stats.var[ch] = m * stats.var[ch] + (1.0 - m) * var;
                }
                let value = Tensor::new(x.shape(), y)?;
                Ok(self.push(
                    value,
                    Op::BatchNorm {
                        input,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                    rg,
                ))
            }
            Mode::Infer => {
                let inv_std: Vec<f64> = stats
                    .var
                    .iter()
                    .map(|v| 1.0 / (v + params.epsilon).sqrt())
                    .collect();
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        let src = &x.data()[off..off + plane];
                        for (yi, xi) in y[off..off + plane].iter_mut().zip(src) {
                            *yi = gm[ch] * (xi - stats.mean[ch]) * inv_std[ch] + bt[ch];
                        }
                    }
                }
                let value = Tensor::new(x.shape(), y)?;
                Ok(self.push(
                    value,
                    Op::BatchNormFrozen {
                        input,
                        gamma,
                        beta,
                        mean: stats.mean.clone(),
                        inv_std,
                    },
                    rg,
                ))
            }
        }
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`; inference is the identity.
    pub fn dropout(&mut self, input: Var, rate: f64, rng: &mut Rng, mode: Mode) -> Result<Var> {
        self.check(input)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0,1)"
            )));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(input);
        }
        let scale = 1.0 / (1.0 - rate);
        let x = self.value(input);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { scale })
            .collect();
        let y = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(x.shape(), y)?;
        let rg = self.grad_of(&[input]);
        Ok(self.push(value, Op::Mask { input, mask }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check(input)?;
        let value = self.value(input).reshape(shape)?.with_grad(false);
        let rg = self.grad_of(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!("add: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let y = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape(), y)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.check(input)?;
        let value = self.value(input).map(|v| v * factor);
        let rg = self.grad_of(&[input]);
        Ok(self.push(value, Op::Scale { input, factor }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.grad_of(&[input]);
        Ok(self.push(value, Op::Sum { input }, rg))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let value = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.grad_of(&[input]);
        Ok(self.push(value, Op::Mean { input }, rg))
    }

    /// `sum_i x_i * weights_i`; handy for reducing any output to a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: &[f64]) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        if x.len() != weights.len() {
            return Err(shape_err!(
                "weighted_sum: {} values vs {} weights",
                x.len(),
                weights.len()
            ));
        }
        let value = Tensor::scalar(x.data().iter().zip(weights).map(|(a, b)| a * b).sum());
        let rg = self.grad_of(&[input]);
        Ok(self.push(
            value,
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Binary cross-entropy of probabilities `pred` against `target` in `[0,1]`.
    pub fn binary_cross_entropy(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        self.check(pred)?;
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(shape_err!(
                "binary_cross_entropy: {} predictions vs {} targets",
                p.len(),
                target.len()
            ));
        }
        let value = Tensor::scalar(crate::losses::bce_value(p.data(), target));
        let rg = self.grad_of(&[pred]);
        Ok(self.push(
            value,
            Op::BinaryCrossEntropy {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// `lambda * sum of squares` over every element of `inputs`.
    pub fn sum_of_squares(&mut self, inputs: &[Var], lambda: f64) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if lambda < 0.0 {
            return Err(Error::InvalidArgument(format!("l2 lambda {lambda} < 0")));
        }
        let total: f64 = inputs
            .iter()
            .map(|&v| self.value(v).data().iter().map(|x| x * x).sum::<f64>())
            .sum();
        let rg = self.grad_of(inputs);
        Ok(self.push(
            Tensor::scalar(lambda * total),
            Op::SumOfSquares {
                inputs: inputs.to_vec(),
                lambda,
            },
            rg,
        ))
    }

    /// Gradients of scalar `loss` with respect to every leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.index] = Some(vec![1.0]);

        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                grads[idx] = Some(dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(
                    Tensor::new(
                        node.value.shape(),
                        g.unwrap_or_else(|| vec![0.0; node.value.len()]),
                    )
                    .expect("gradient shape matches leaf"),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let (dx, dk, db) = kernels::conv2d_backward(
                    x.data(),
                    x.dim(0),
                    geom,
                    k.dim(0),
                    k.data(),
                    dy,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                if let Some(dx) = dx {
                    accumulate_owned(&mut grads[input.index], dx);
                }
                if let Some(dk) = dk {
                    accumulate_owned(&mut grads[kernel.index], dk);
                }
                if self.needs(*bias) {
                    accumulate_owned(&mut grads[bias.index], db);
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let (dx, dk, db) = kernels::conv_transpose_backward(
                    x.data(),
                    x.dim(0),
                    geom,
                    k.dim(0),
                    k.data(),
                    dy,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                if let Some(dx) = dx {
                    accumulate_owned(&mut grads[input.index], dx);
                }
                if let Some(dk) = dk {
                    accumulate_owned(&mut grads[kernel.index], dk);
                }
                if self.needs(*bias) {
                    accumulate_owned(&mut grads[bias.index], db);
                }
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                let (n, f) = (x.dim(0), x.dim(1));
                let g = w.dim(1);
                if self.needs(*input) {
                    let mut dx = vec![0.0; n * f];
                    kernels::gemm(n, g, f, dy, false, w.data(), true, 0.0, &mut dx);
                    accumulate_owned(&mut grads[input.index], dx);
                }
                if self.needs(*weights) {
                    let mut dw = vec![0.0; f * g];
                    kernels::gemm(f, n, g, x.data(), true, dy, false, 0.0, &mut dw);
                    accumulate_owned(&mut grads[weights.index], dw);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; g];
                    for row in dy.chunks(g) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate_owned(&mut grads[bias.index], db);
                }
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&xi, &yi))| g * kind.derivative(xi, yi))
                    .collect();
                accumulate_owned(&mut grads[input.index], dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (g, &i) in dy.iter().zip(argmax) {
                    dx[i] += g;
                }
                accumulate_owned(&mut grads[input.index], dx);
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let plane = x.dim(2) * x.dim(3);
                let mut dx = vec![0.0; x.len()];
                for (chunk, g) in dx.chunks_mut(plane).zip(dy) {
                    chunk.fill(g / plane as f64);
                }
                accumulate_owned(&mut grads[input.index], dx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let x = self.value(*input);
                let (n, c) = (x.dim(0), x.dim(1));
                let plane = x.dim(2) * x.dim(3);
                let m = (n * plane) as f64;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] += dy[i] * xhat[i];
                            dbeta[ch] += dy[i];
                        }
                    }
                }
                if self.needs(*input) {
                    let mut dx = vec![0.0; x.len()];
                    for ch in 0..c {
                        let k = gm[ch] * inv_std[ch] / m;
                        for b in 0..n {
                            let off = (b * c + ch) * plane;
                            for i in off..off + plane {
                                dx[i] = k * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                    accumulate_owned(&mut grads[input.index], dx);
                }
                if self.needs(*gamma) {
                    accumulate_owned(&mut grads[gamma.index], dgamma);
                }
                if self.needs(*beta) {
                    accumulate_owned(&mut grads[beta.index], dbeta);
                }
            }
            Op::BatchNormFrozen {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let x = self.value(*input);
                let (n, c) = (x.dim(0), x.dim(1));
                let plane = x.dim(2) * x.dim(3);
                let gm = self.value(*gamma).data();
                let mut dx = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            dx[i] = dy[i] * gm[ch] * inv_std[ch];
                            dgamma[ch] += dy[i] * (x.data()[i] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += dy[i];
                        }
                    }
                }
                if self.needs(*input) {
                    accumulate_owned(&mut grads[input.index], dx);
                }
                if self.needs(*gamma) {
                    accumulate_owned(&mut grads[gamma.index], dgamma);
                }
                if self.needs(*beta) {
                    accumulate_owned(&mut grads[beta.index], dbeta);
                }
            }
            Op::Mask { input, mask } => {
                let dx: Vec<f64> = dy.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate_owned(&mut grads[input.index], dx);
            }
            Op::Reshape { input } => accumulate(&mut grads[input.index], dy),
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.index], dy);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.index], dy);
                }
            }
            Op::Scale { input, factor } => {
                let dx: Vec<f64> = dy.iter().map(|g| g * factor).collect();
                accumulate_owned(&mut grads[input.index], dx);
            }
            Op::Sum { input } => {
                let dx = vec![dy[0]; self.value(*input).len()];
                accumulate_owned(&mut grads[input.index], dx);
            }
            Op::Mean { input } => {
                let len = self.value(*input).len();
                let dx = vec![dy[0] / len as f64; len];
                accumulate_owned(&mut grads[input.index], dx);
            }
            Op::WeightedSum { input, weights } => {
                let dx: Vec<f64> = weights.iter().map(|w| w * dy[0]).collect();
                accumulate_owned(&mut grads[input.index], dx);
            }
            Op::BinaryCrossEntropy { pred, target } => {
                let p = self.value(*pred).data();
                let dx = crate::losses::bce_grad(p, target, dy[0]);
                accumulate_owned(&mut grads[pred.index], dx);
            }
            Op::SumOfSquares { inputs, lambda } => {
                for v in inputs {
                    if self.needs(*v) {
                        let dx: Vec<f64> = self
                            .value(*v)
                            .data()
                            .iter()
                            .map(|x| 2.0 * lambda * x * dy[0])
                            .collect();
                        accumulate_owned(&mut grads[v.index], dx);
                    }
                }
            }
        }
    }
}
