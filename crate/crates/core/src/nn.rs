//! Declarative layer stacks and their parameters.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tape::{Activation, BatchNormParams, BatchNormStats, Gradients, Mode, Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the normal draw used for every conv/dense weight.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    LeakyRelu {
        alpha: f64,
    },
    Tanh,
    Sigmoid,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    BatchNorm {
        channels: usize,
    },
    Dropout {
        rate: f64,
    },
    /// Reshape each sample to `shape` (batch axis excluded).
    Reshape {
        shape: Vec<usize>,
    },
    Flatten,
}

/// A named layer stack with a fixed per-sample input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    /// Per-sample shape after every layer, validating the whole stack.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let ctx = |msg: String| shape_err!("{} layer {i}: {msg}", self.name);
            shape = match layer {
                Layer::Dense { inputs, outputs } => match shape[..] {
                    [f] if f == *inputs => vec![*outputs],
                    _ => return Err(ctx(format!("dense expects [{inputs}], got {shape:?}"))),
                },
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => match shape[..] {
                    [c, h, w] if c == *in_channels => {
                        if *stride == 0 || h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                            return Err(ctx(format!("conv kernel {kernel} does not fit {h}x{w}")));
                        }
                        vec![
                            *out_channels,
                            (h + 2 * padding - kernel) / stride + 1,
                            (w + 2 * padding - kernel) / stride + 1,
                        ]
                    }
                    _ => {
                        return Err(ctx(format!(
                            "conv expects {in_channels} channels, got {shape:?}"
                        )))
                    }
                },
                Layer::ConvTranspose2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => match shape[..] {
                    [c, h, w] if c == *in_channels => {
                        let oh = (h - 1) * stride + kernel;
                        let ow = (w - 1) * stride + kernel;
                        if oh <= 2 * padding || ow <= 2 * padding {
                            return Err(ctx("transposed conv output is empty".into()));
                        }
                        vec![*out_channels, oh - 2 * padding, ow - 2 * padding]
                    }
                    _ => {
                        return Err(ctx(format!(
                            "tconv expects {in_channels} channels, got {shape:?}"
                        )))
                    }
                },
                Layer::MaxPool2d { window, stride } => match shape[..] {
                    [c, h, w] if h >= *window && w >= *window && *stride > 0 => {
                        vec![c, (h - window) / stride + 1, (w - window) / stride + 1]
                    }
                    _ => return Err(ctx(format!("pool window {window} does not fit {shape:?}"))),
                },
                Layer::GlobalAvgPool => match shape[..] {
                    [c, _, _] => vec![c],
                    _ => return Err(ctx(format!("global pool expects [C,H,W], got {shape:?}"))),
                },
                Layer::BatchNorm { channels } => match shape[..] {
                    [c, _, _] if c == *channels => shape.clone(),
                    _ => {
                        return Err(ctx(format!(
                            "batchnorm expects {channels} channels, got {shape:?}"
                        )))
                    }
                },
                Layer::Reshape { shape: s } => {
                    if s.iter().product::<usize>() != shape.iter().product::<usize>() {
                        return Err(ctx(format!("cannot reshape {shape:?} to {s:?}")));
                    }
                    s.clone()
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(ctx(format!("dropout rate {rate} outside [0,1)")));
                    }
                    shape.clone()
                }
                Layer::LeakyRelu { alpha } => {
                    if !(*alpha > 0.0 && *alpha < 1.0) {
                        return Err(ctx(format!("leaky relu slope {alpha} outside (0,1)")));
                    }
                    shape.clone()
                }
                Layer::Relu | Layer::Tanh | Layer::Sigmoid => shape.clone(),
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .shapes()?
            .pop()
            .unwrap_or_else(|| self.input_shape.clone()))
    }
}

/// Named trainable tensors plus non-trainable buffers (batch-norm running stats).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    pub params: IndexMap<String, Tensor>,
    pub buffers: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Every tensor's little-endian bytes in order; equal stores give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in self.params.iter().chain(self.buffers.iter()) {
            out.extend_from_slice(name.as_bytes());
            out.extend(t.to_le_bytes());
        }
        out
    }
}

fn param_name(layer: usize, what: &str) -> String {
    format!("{layer}.{what}")
}

/// Weights ~ Normal(0, 0.02); biases and batch-norm beta 0; gamma 1;
/// running mean 0 and running variance 1.
pub fn init_weights(spec: &NetworkSpec, rng: &mut Rng) -> Result<ParamStore> {
    spec.shapes()?;
    let mut store = ParamStore::default();
    let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| INIT_STD * rng.normal());
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            Layer::Dense { inputs, outputs } => {
                store
                    .params
                    .insert(param_name(i, "weight"), normal(&[inputs, outputs]));
                store
                    .params
                    .insert(param_name(i, "bias"), Tensor::zeros(&[outputs]));
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                store.params.insert(
                    param_name(i, "weight"),
                    normal(&[out_channels, in_channels, kernel, kernel]),
                );
                store
                    .params
                    .insert(param_name(i, "bias"), Tensor::zeros(&[out_channels]));
            }
            Layer::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                store.params.insert(
                    param_name(i, "weight"),
                    normal(&[in_channels, out_channels, kernel, kernel]),
                );
                store
                    .params
                    .insert(param_name(i, "bias"), Tensor::zeros(&[out_channels]));
            }
            Layer::BatchNorm { channels } => {
                store
                    .params
                    .insert(param_name(i, "gamma"), Tensor::full(&[channels], 1.0));
                store
                    .params
                    .insert(param_name(i, "beta"), Tensor::zeros(&[channels]));
                store
                    .buffers
                    .insert(param_name(i, "running_mean"), Tensor::zeros(&[channels]));
                store
                    .buffers
                    .insert(param_name(i, "running_var"), Tensor::full(&[channels], 1.0));
            }
            _ => {}
        }
    }
    Ok(store)
}

/// A spec together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub store: ParamStore,
    pub batchnorm: BatchNormParams,
}

/// Parameter leaves of one network on one tape, in store order.
pub struct Binding {
    pub vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("parameter {name} not bound")))
    }

    pub fn all(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn gradients(&self, grads: &mut Gradients) -> Result<IndexMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                grads.take(*v).map(|g| (k.clone(), g)).ok_or_else(|| {
                    Error::Graph(format!("no gradient for {k}; was it bound as a constant?"))
                })
            })
            .collect()
    }

    /// Vars of conv/dense weights only (the L2-regularized subset).
    pub fn weights(&self) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.ends_with(".weight"))
            .map(|(_, v)| *v)
            .collect()
    }
}

impl Network {
    pub fn new(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        let store = init_weights(&spec, rng)?;
        Ok(Network {
            spec,
            store,
            batchnorm: BatchNormParams::default(),
        })
    }

    pub fn from_parts(spec: NetworkSpec, store: ParamStore) -> Result<Self> {
        let expected = init_weights(&spec, &mut Rng::new(0, 0))?;
        for (name, t) in expected.params.iter().chain(expected.buffers.iter()) {
            let have = store
                .params
                .get(name)
                .or_else(|| store.buffers.get(name))
                .ok_or_else(|| Error::Data(format!("{}: missing tensor {name}", spec.name)))?;
            if have.shape() != t.shape() {
                return Err(shape_err!(
                    "{}: tensor {name} has shape {:?}, expected {:?}",
                    spec.name,
                    have.shape(),
                    t.shape()
                ));
            }
        }
        Ok(Network {
            spec,
            store,
            batchnorm: BatchNormParams::default(),
        })
    }

    /// Places every parameter on the tape. With `trainable == false` they are
    /// constants and no gradient is formed for them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let vars = self
            .store
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Binding { vars }
    }

    /// Runs the stack on a batch `[N, ..input_shape]`. In training mode
    /// batch-norm running statistics in the store are updated.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        input: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let (y, updates) = self.run(tape, binding, input, mode, rng)?;
        for (name, t) in updates {
            self.store.buffers[&name] = t;
        }
        Ok(y)
    }

    /// Like [`Network::forward`] but never writes running statistics back.
    pub fn forward_frozen(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        input: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        Ok(self.run(tape, binding, input, mode, rng)?.0)
    }

    /// Inference without recording gradients; running statistics are untouched.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let (y, _) = self.run(&mut tape, &binding, x, Mode::Infer, &mut Rng::new(0, 0))?;
        Ok(tape.value(y).clone())
    }

    fn run(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        input: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Var, Vec<(String, Tensor)>)> {
        let batch = tape.value(input).dim(0);
        let expected: Vec<usize> = std::iter::once(batch)
            .chain(self.spec.input_shape.iter().copied())
            .collect();
        if tape.value(input).shape() != expected.as_slice() {
            return Err(shape_err!(
                "{}: input shape {:?}, expected {:?}",
                self.spec.name,
                tape.value(input).shape(),
                expected
            ));
        }
        let mut updates = Vec::new();
        let mut x = input;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            x = match layer {
                Layer::Dense { .. } => {
                    let w = binding.var(&param_name(i, "weight"))?;
                    let b = binding.var(&param_name(i, "bias"))?;
                    tape.dense(x, w, b)?
                }
                Layer::Conv2d {
                    stride, padding, ..
                } => {
                    let w = binding.var(&param_name(i, "weight"))?;
                    let b = binding.var(&param_name(i, "bias"))?;
                    tape.conv2d(x, w, b, *stride, *padding)?
                }
                Layer::ConvTranspose2d {
                    stride, padding, ..
                } => {
                    let w = binding.var(&param_name(i, "weight"))?;
                    let b = binding.var(&param_name(i, "bias"))?;
                    tape.conv2d_transpose(x, w, b, *stride, *padding)?
                }
                Layer::Relu => tape.activation(x, Activation::Relu)?,
                Layer::LeakyRelu { alpha } => tape.activation(x, Activation::LeakyRelu(*alpha))?,
                Layer::Tanh => tape.activation(x, Activation::Tanh)?,
                Layer::Sigmoid => tape.activation(x, Activation::Sigmoid)?,
                Layer::MaxPool2d { window, stride } => tape.maxpool2d(x, *window, *stride)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::BatchNorm { channels } => {
                    let gamma = binding.var(&param_name(i, "gamma"))?;
                    let beta = binding.var(&param_name(i, "beta"))?;
                    let mean_key = param_name(i, "running_mean");
                    let var_key = param_name(i, "running_var");
                    let buffer = |k: &str| {
                        self.store
                            .buffers
                            .get(k)
                            .map(|t| t.data().to_vec())
                            .ok_or_else(|| Error::Data(format!("missing buffer {k}")))
                    };
                    let mut stats = BatchNormStats {
                        mean: buffer(&mean_key)?,
                        var: buffer(&var_key)?,
                    };
                    let y = tape.batchnorm(x, gamma, beta, &mut stats, mode, self.batchnorm)?;
                    if mode == Mode::Train {
                        updates.push((mean_key, Tensor::new(&[*channels], stats.mean)?));
                        updates.push((var_key, Tensor::new(&[*channels], stats.var)?));
                    }
                    y
                }
                Layer::Dropout { rate } => tape.dropout(x, *rate, rng, mode)?,
                Layer::Reshape { shape } => {
                    let mut full = vec![batch];
                    full.extend_from_slice(shape);
                    tape.reshape(x, &full)?
                }
                Layer::Flatten => {
                    let per: usize = tape.value(x).len() / batch;
                    tape.reshape(x, &[batch, per])?
                }
            };
        }
        Ok((x, updates))
    }
}
