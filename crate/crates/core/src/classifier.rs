//! CNN tumor classifier with plateau learning-rate reduction, early stopping
//! and best-epoch restore.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{ImageDataset, NEGATIVE, POSITIVE};
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{Layer, Network, NetworkSpec};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{stream, Rng};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// Probabilities at or above this are labelled positive.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub image_size: usize,
    /// `(conv layers, channels)` per block; each block ends with batch norm,
    /// 2x2 max pooling and dropout.
    pub blocks: Vec<(usize, usize)>,
    pub dense_units: usize,
    pub block_dropout: f64,
    pub dense_dropout: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub l2_lambda: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Smallest validation-loss decrease that counts as an improvement.
    pub min_delta: f64,
    pub early_stop_patience: usize,
    pub lr_reduce_factor: f64,
    pub lr_reduce_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            image_size: 128,
            blocks: vec![(2, 32), (2, 64), (2, 128)],
            dense_units: 1024,
            block_dropout: 0.25,
            dense_dropout: 0.5,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            l2_lambda: 1e-4,
            max_epochs: 200,
            batch_size: 32,
            min_delta: 1e-4,
            early_stop_patience: 25,
            lr_reduce_factor: 0.5,
            lr_reduce_patience: 10,
            min_lr: 1e-6,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    /// Negated comparisons so NaN fields are rejected as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("classifier lr {} must be > 0", self.lr));
        }
        if !(self.lr_reduce_factor > 0.0 && self.lr_reduce_factor < 1.0) {
            return bad(format!(
                "lr_reduce_factor {} outside (0,1)",
                self.lr_reduce_factor
            ));
        }
        if self.early_stop_patience == 0 || self.lr_reduce_patience == 0 {
            return bad("patience values must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("classifier batch_size must be >= 1".into());
        }
        if !(self.min_lr >= 0.0) || !(self.min_delta >= 0.0) || !(self.l2_lambda >= 0.0) {
            return bad("min_lr, min_delta and l2_lambda must be >= 0".into());
        }
        for (name, r) in [
            ("block_dropout", self.block_dropout),
            ("dense_dropout", self.dense_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0,1)"));
            }
        }
        if self.blocks.is_empty() || self.blocks.iter().any(|&(n, c)| n == 0 || c == 0) {
            return bad("every block needs at least one conv layer and channel".into());
        }
        if self.dense_units == 0 {
            return bad("dense_units must be >= 1".into());
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

pub fn build_cnn(config: &ClassifierConfig) -> Result<NetworkSpec> {
    config.validate()?;
    let depth = 1usize << config.blocks.len();
    if config.image_size < depth || !config.image_size.is_multiple_of(depth) {
        return Err(Error::Config(format!(
            "image size {} too small or not divisible for {} pooling stages",
            config.image_size,
            config.blocks.len()
        )));
    }
    let mut layers = Vec::new();
    let mut in_channels = 1;
    for &(convs, channels) in &config.blocks {
        for _ in 0..convs {
            layers.push(Layer::Conv2d {
                in_channels,
                out_channels: channels,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            layers.push(Layer::Relu);
            in_channels = channels;
        }
        layers.push(Layer::BatchNorm { channels });
        layers.push(Layer::MaxPool2d {
            window: 2,
            stride: 2,
        });
        if config.block_dropout > 0.0 {
            layers.push(Layer::Dropout {
                rate: config.block_dropout,
            });
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Dense {
        inputs: in_channels,
        outputs: config.dense_units,
    });
    layers.push(Layer::Relu);
    if config.dense_dropout > 0.0 {
        layers.push(Layer::Dropout {
            rate: config.dense_dropout,
        });
    }
    layers.push(Layer::Dense {
        inputs: config.dense_units,
        outputs: 1,
    });
    layers.push(Layer::Sigmoid);
    let spec = NetworkSpec {
        name: "classifier".into(),
        input_shape: vec![1, config.image_size, config.image_size],
        layers,
    };
    spec.shapes()?;
    Ok(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoEpochs,
    MaxEpochs,
    EarlyStopping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stop_reason: StopReason,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc,lr\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
            );
        }
        s
    }

    pub fn lrs(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.lr).collect()
    }
}

/// Probability and thresholded label per image, computed in inference mode.
pub fn predict(net: &Network, images: &[Tensor]) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut probs = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let out = net.infer(&Tensor::stack(&refs)?)?;
        probs.extend_from_slice(out.data());
    }
    let labels = probs.iter().map(|&p| u8::from(p >= THRESHOLD)).collect();
    Ok((probs, labels))
}

/// Mean binary cross-entropy and accuracy over a dataset, evaluated in index
/// order with inference-mode layers.
pub fn evaluate(net: &Network, data: &ImageDataset) -> Result<(f64, f64)> {
    let (probs, labels) = predict(net, data.images())?;
    let targets: Vec<f64> = data.labels().iter().map(|&l| f64::from(l)).collect();
    let loss = losses::value::binary_cross_entropy(&probs, &targets)?;
    let correct = labels
        .iter()
        .zip(data.labels())
        .filter(|(a, b)| a == b)
        .count();
    Ok((loss, correct as f64 / data.len() as f64))
}

fn check_split(data: &ImageDataset, what: &str, size: (usize, usize)) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data(format!("{what} set is empty")));
    }
    if data.image_size() != Some(size) {
        return Err(Error::Data(format!(
            "{what} images are {:?}, classifier expects {}x{}",
            data.image_size(),
            size.0,
            size.1
        )));
    }
    Ok(())
}

/// Builds the default CNN from `config` and trains it.
pub fn train_classifier(
    train: &ImageDataset,
    val: &ImageDataset,
    config: &ClassifierConfig,
) -> Result<(Network, TrainReport)> {
    let net = Network::new(
        build_cnn(config)?,
        &mut Rng::new(config.seed, stream::WEIGHTS),
    )?;
    train_network(net, train, val, config, &mut |_| {})
}

/// Trains any binary-output network: per epoch, shuffled mini-batches of
/// cross-entropy plus an L2 penalty on conv/dense weights, then validation.
/// Returns the parameters of the epoch with the lowest validation loss.
pub fn train_network(
    mut net: Network,
    train: &ImageDataset,
    val: &ImageDataset,
    config: &ClassifierConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Network, TrainReport)> {
    config.validate()?;
    let size = match *net.spec.input_shape {
        [1, h, w] => (h, w),
        ref s => {
            return Err(Error::Shape(format!(
                "classifier input must be [1,H,W], got {s:?}"
            )))
        }
    };
    check_split(train, "training", size)?;
    check_split(val, "validation", size)?;
    if train.count(POSITIVE) == 0 || train.count(NEGATIVE) == 0 {
        return Err(Error::Data("training set must contain both classes".into()));
    }
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_loss: None,
        stop_reason: StopReason::NoEpochs,
    };
    if config.max_epochs == 0 {
        return Ok((net, report));
    }

    let mut opt = AdamState::new(config.adam());
    let mut shuffle = Rng::new(config.seed, stream::SHUFFLE);
    let mut dropout = Rng::new(config.seed, stream::DROPOUT);
    let mut best: Option<(f64, Network)> = None;
    let (mut wait_stop, mut wait_lr) = (0, 0);
    report.stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let lr = opt.lr();
        let order = shuffle.permutation(train.len());
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(config.batch_size) {
            let targets = train.targets(idx);
            let mut tape = Tape::new();
            let binding = net.bind(&mut tape, true);
            let x = tape.constant(train.batch(idx)?);
            let p = net.forward(&mut tape, &binding, x, Mode::Train, &mut dropout)?;
            let bce = losses::binary_cross_entropy(&mut tape, p, &targets)?;
            let l2 = losses::l2_penalty(&mut tape, &binding.weights(), config.l2_lambda)?;
            let loss = tape.add(bce, l2)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    context: format!("classifier loss is {value} in epoch {epoch}"),
                });
            }
            loss_sum += value * idx.len() as f64;
            correct += tape
                .value(p)
                .data()
                .iter()
                .zip(&targets)
                .filter(|(&q, &t)| f64::from(u8::from(q >= THRESHOLD)) == t)
                .count();
            let mut grads = tape.backward(loss)?;
            let grads = binding.gradients(&mut grads)?;
            adam_step(&mut net.store, &grads, &mut opt).map_err(|e| match e {
                Error::Divergence { context } => Error::Divergence {
                    context: format!("epoch {epoch}: {context}"),
                },
                other => other,
            })?;
        }
        let (val_loss, val_acc) = evaluate(&net, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                context: format!("validation loss is {val_loss} in epoch {epoch}"),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
            lr,
        };
        report.epochs.push(record);
        on_epoch(&record);

        let improved = match &best {
            None => true,
            Some((b, _)) => val_loss < b - config.min_delta,
        };
        if improved {
            best = Some((val_loss, net.clone()));
            report.best_epoch = Some(epoch);
            report.best_val_loss = Some(val_loss);
            wait_stop = 0;
            wait_lr = 0;
        } else {
            wait_stop += 1;
            wait_lr += 1;
            if wait_lr >= config.lr_reduce_patience {
                let reduced = (lr * config.lr_reduce_factor).max(config.min_lr);
                if reduced < lr {
                    opt.set_lr(reduced);
                }
                wait_lr = 0;
            }
            if wait_stop >= config.early_stop_patience {
                report.stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }
    let (_, best_net) = best.expect("at least one epoch ran");
    Ok((best_net, report))
}
