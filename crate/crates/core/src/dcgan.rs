//! DC-GAN generator and discriminator stacks and the alternating training loop.

use serde::{Deserialize, Serialize};

use crate::data::{ImageDataset, Provenance, POSITIVE};
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{Layer, Network, NetworkSpec};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{stream, Rng};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Images in a sample grid (4 x 4).
pub const PROBE_COUNT: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub z_dim: usize,
    pub image_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Emit a probe grid after every `sample_every` steps; 0 disables grids.
    pub sample_every: usize,
    pub seed: u64,
    /// Widest channel count. Generator runs `base, base/2, base/4`;
    /// discriminator runs `base/4, base/2, base, base`.
    pub base_channels: usize,
    pub dropout: f64,
    pub batchnorm: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            z_dim: 400,
            image_size: 128,
            epochs: 10,
            steps_per_epoch: 3750,
            batch_size: 4,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            sample_every: 375,
            seed: 0,
            base_channels: 256,
            dropout: 0.3,
            batchnorm: false,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 {
            return Err(Error::Config("gan z_dim must be >= 1".into()));
        }
        if ![32, 64, 128].contains(&self.image_size) {
            return Err(Error::Config(format!(
                "gan image_size {} unsupported; use 32, 64 or 128",
                self.image_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("gan batch_size must be >= 1".into()));
        }
        if self.base_channels < 4 || !self.base_channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "gan base_channels {} must be a positive multiple of 4",
                self.base_channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "gan dropout {} outside [0,1)",
                self.dropout
            )));
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

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }
}

pub fn build_generator(config: &GanConfig) -> Result<NetworkSpec> {
    config.validate()?;
    let base = config.base_channels;
    let s = config.image_size / 4;
    let leaky = Layer::LeakyRelu { alpha: LEAKY_SLOPE };
    let bn = |channels| config.batchnorm.then_some(Layer::BatchNorm { channels });
    let up = |in_channels, out_channels| Layer::ConvTranspose2d {
        in_channels,
        out_channels,
        kernel: 4,
        stride: 2,
        padding: 1,
    };
    let layers = [
        Some(Layer::Dense {
            inputs: config.z_dim,
            outputs: base * s * s,
        }),
        Some(Layer::Reshape {
            shape: vec![base, s, s],
        }),
        bn(base),
        Some(leaky.clone()),
        Some(up(base, base / 2)),
        bn(base / 2),
        Some(leaky.clone()),
        Some(up(base / 2, base / 4)),
        bn(base / 4),
        Some(leaky),
        Some(Layer::Conv2d {
            in_channels: base / 4,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        }),
        Some(Layer::Tanh),
    ];
    let spec = NetworkSpec {
        name: "generator".into(),
        input_shape: vec![config.z_dim],
        layers: layers.into_iter().flatten().collect(),
    };
    spec.shapes()?;
    Ok(spec)
}

pub fn build_discriminator(config: &GanConfig) -> Result<NetworkSpec> {
    config.validate()?;
    let base = config.base_channels;
    let channels = [1, base / 4, base / 2, base, base];
    let mut layers = Vec::new();
    for i in 0..4 {
        let last = i == 3;
        layers.push(Layer::Conv2d {
            in_channels: channels[i],
            out_channels: channels[i + 1],
            kernel: if last { 3 } else { 4 },
            stride: if last { 1 } else { 2 },
            padding: 1,
        });
        if config.batchnorm && i > 0 {
            layers.push(Layer::BatchNorm {
                channels: channels[i + 1],
            });
        }
        layers.push(Layer::LeakyRelu { alpha: LEAKY_SLOPE });
        if config.dropout > 0.0 {
            layers.push(Layer::Dropout {
                rate: config.dropout,
            });
        }
    }
    let side = config.image_size / 8;
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense {
        inputs: base * side * side,
        outputs: 1,
    });
    layers.push(Layer::Sigmoid);
    let spec = NetworkSpec {
        name: "discriminator".into(),
        input_shape: vec![1, config.image_size, config.image_size],
        layers,
    };
    spec.shapes()?;
    Ok(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub d_loss: f64,
    pub g_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub config: GanConfig,
    pub generator: Network,
    pub discriminator: Network,
    pub g_opt: AdamState,
    pub d_opt: AdamState,
    pub step: u64,
}

/// `n` standard-normal latent vectors as `[n, z_dim]`.
pub fn sample_latent(n: usize, z_dim: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(&[n, z_dim], |_| rng.normal())
}

fn check_finite(loss: f64, net: &str, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            context: format!("{net} loss is {loss} at step {step}"),
        })
    }
}

impl GanModel {
    /// Fresh networks; weights come from the config seed, generator first.
    pub fn new(config: &GanConfig) -> Result<Self> {
        let mut rng = Rng::new(config.seed, stream::WEIGHTS);
        let generator = Network::new(build_generator(config)?, &mut rng)?;
        let discriminator = Network::new(build_discriminator(config)?, &mut rng)?;
        Ok(GanModel {
            config: config.clone(),
            generator,
            discriminator,
            g_opt: AdamState::new(config.adam()),
            d_opt: AdamState::new(config.adam()),
            step: 0,
        })
    }

    /// One discriminator update on `real` against fresh fakes, then one
    /// generator update through the fixed discriminator with another fresh `z`.
    /// Dropout in the discriminator stays active in both phases.
    pub fn train_step(&mut self, real: &Tensor, rng: &mut Rng) -> Result<StepLosses> {
        let d_loss = self.discriminator_step(real, rng)?;
        let g_loss = self.generator_step(real.dim(0), rng)?;
        self.step += 1;
        Ok(StepLosses { d_loss, g_loss })
    }

    /// First phase of [`GanModel::train_step`]: the generator is read only.
    pub fn discriminator_step(&mut self, real: &Tensor, rng: &mut Rng) -> Result<f64> {
        let n = real.dim(0);
        let want = [n, 1, self.config.image_size, self.config.image_size];
        if real.shape() != want {
            return Err(Error::Shape(format!(
                "real batch has shape {:?}, expected {want:?}",
                real.shape()
            )));
        }
        let fake = {
            let mut tape = Tape::new();
            let g = self.generator.bind(&mut tape, false);
            let z = tape.constant(sample_latent(n, self.config.z_dim, rng));
            let y = self
                .generator
                .forward_frozen(&mut tape, &g, z, Mode::Train, rng)?;
            tape.value(y).clone()
        };
        let mut tape = Tape::new();
        let d = self.discriminator.bind(&mut tape, true);
        let real_in = tape.constant(real.clone());
        let fake_in = tape.constant(fake);
        let d_real = self
            .discriminator
            .forward(&mut tape, &d, real_in, Mode::Train, rng)?;
        let d_fake = self
            .discriminator
            .forward(&mut tape, &d, fake_in, Mode::Train, rng)?;
        let loss = losses::discriminator_loss(&mut tape, d_real, d_fake)?;
        let d_loss = tape.value(loss).item();
        check_finite(d_loss, "discriminator", self.step)?;
        let mut grads = tape.backward(loss)?;
        let grads = d.gradients(&mut grads)?;
        adam_step(&mut self.discriminator.store, &grads, &mut self.d_opt)
            .map_err(|e| tag(e, "discriminator"))?;
        Ok(d_loss)
    }

    /// Second phase of [`GanModel::train_step`] on `n` fresh latents: the
    /// discriminator, including its running statistics, is read only.
    pub fn generator_step(&mut self, n: usize, rng: &mut Rng) -> Result<f64> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "generator step needs a non-empty batch".into(),
            ));
        }
        let mut tape = Tape::new();
        let g = self.generator.bind(&mut tape, true);
        let d = self.discriminator.bind(&mut tape, false);
        let z = tape.constant(sample_latent(n, self.config.z_dim, rng));
        let fake = self.generator.forward(&mut tape, &g, z, Mode::Train, rng)?;
        let d_fake = self
            .discriminator
            .forward_frozen(&mut tape, &d, fake, Mode::Train, rng)?;
        let loss = losses::generator_loss(&mut tape, d_fake)?;
        let g_loss = tape.value(loss).item();
        check_finite(g_loss, "generator", self.step)?;
        let mut grads = tape.backward(loss)?;
        let grads = g.gradients(&mut grads)?;
        adam_step(&mut self.generator.store, &grads, &mut self.g_opt)
            .map_err(|e| tag(e, "generator"))?;
        Ok(g_loss)
    }

    /// Generator output in inference mode for the given latent batch.
    pub fn generate_from(&self, z: &Tensor) -> Result<Tensor> {
        self.generator.infer(z)
    }

    /// The fixed probe batch used for sample grids.
    pub fn probe_latent(&self) -> Tensor {
        sample_latent(
            PROBE_COUNT,
            self.config.z_dim,
            &mut Rng::new(self.config.seed, stream::PROBE),
        )
    }
}

fn tag(e: Error, net: &str) -> Error {
    match e {
        Error::Divergence { context } => Error::Divergence {
            context: format!("{net}: {context}"),
        },
        other => other,
    }
}

/// `n` generated images labelled positive with synthetic provenance.
pub fn generate_images(model: &GanModel, n: usize, rng: &mut Rng) -> Result<ImageDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("generate: n must be >= 1".into()));
    }
    let mut ds = ImageDataset::new("synthetic");
    let mut left = n;
    while left > 0 {
        let b = left.min(64);
        let z = sample_latent(b, model.config.z_dim, rng);
        for img in model.generate_from(&z)?.unstack() {
            ds.push(img, POSITIVE, Provenance::Synthetic)?;
        }
        left -= b;
    }
    Ok(ds)
}

/// Tiles `[N, 1, H, W]` images into a `[1, rows*H, cols*W]` grid, row-major,
/// leaving unused cells at -1.
pub fn tile_grid(images: &Tensor, cols: usize) -> Result<Tensor> {
    let (n, h, w) = match *images.shape() {
        [n, 1, h, w] => (n, h, w),
        ref s => return Err(Error::Shape(format!("grid expects [N,1,H,W], got {s:?}"))),
    };
    let cols = cols.clamp(1, n);
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![-1.0; gh * gw];
    for (k, img) in images.data().chunks(h * w).enumerate() {
        let (r, c) = (k / cols, k % cols);
        for y in 0..h {
            let dst = (r * h + y) * gw + c * w;
            out[dst..dst + w].copy_from_slice(&img[y * w..(y + 1) * w]);
        }
    }
    Tensor::new(&[1, gh, gw], out)
}

/// Cycles through a dataset in shuffled passes.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSampler {
    pub order: Vec<usize>,
    pub cursor: usize,
    pub rng: Rng,
}

impl BatchSampler {
    pub fn new(len: usize, rng: Rng) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data(
                "cannot sample batches from an empty dataset".into(),
            ));
        }
        let mut s = BatchSampler {
            order: Vec::new(),
            cursor: 0,
            rng,
        };
        s.order = s.rng.permutation(len);
        Ok(s)
    }

    pub fn next_indices(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order = self.rng.permutation(self.order.len());
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Receives training progress. Every method defaults to doing nothing.
pub trait GanSink {
    fn on_step(&mut self, _step: u64, _losses: &StepLosses) -> Result<()> {
        Ok(())
    }
    fn on_samples(&mut self, _step: u64, _grid: &Tensor) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(&mut self, _epoch: usize, _trainer: &GanTrainer) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl GanSink for NullSink {}

/// Complete resumable state of a GAN run.
#[derive(Clone, Debug, PartialEq)]
pub struct GanTrainer {
    pub model: GanModel,
    pub noise: Rng,
    pub sampler: BatchSampler,
    pub log: Vec<StepLosses>,
}

impl GanTrainer {
    pub fn new(config: &GanConfig, dataset_len: usize) -> Result<Self> {
        Ok(GanTrainer {
            model: GanModel::new(config)?,
            noise: Rng::new(config.seed, stream::NOISE),
            sampler: BatchSampler::new(dataset_len, Rng::new(config.seed, stream::SHUFFLE))?,
            log: Vec::new(),
        })
    }

    /// Trains until `epochs * steps_per_epoch` steps have been taken, starting
    /// from wherever this trainer left off.
    pub fn run(&mut self, dataset: &ImageDataset, sink: &mut dyn GanSink) -> Result<()> {
        let cfg = self.model.config.clone();
        check_dataset(dataset, &cfg)?;
        if self.sampler.order.len() != dataset.len() {
            return Err(Error::Data(format!(
                "trainer was built for {} images, dataset has {}",
                self.sampler.order.len(),
                dataset.len()
            )));
        }
        let total = cfg.total_steps();
        while self.model.step < total {
            let idx = self.sampler.next_indices(cfg.batch_size);
            let real = dataset.batch(&idx)?;
            let losses = self.model.train_step(&real, &mut self.noise)?;
            let step = self.model.step;
            self.log.push(losses);
            sink.on_step(step, &losses)?;
            if cfg.sample_every > 0 && step.is_multiple_of(cfg.sample_every as u64) {
                let grid = tile_grid(&self.model.generate_from(&self.model.probe_latent())?, 4)?;
                sink.on_samples(step, &grid)?;
            }
            if step.is_multiple_of(cfg.steps_per_epoch as u64) {
                sink.on_epoch_end((step / cfg.steps_per_epoch as u64) as usize, self)?;
            }
        }
        Ok(())
    }
}

fn check_dataset(dataset: &ImageDataset, cfg: &GanConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Data("gan training set is empty".into()));
    }
    if dataset.count(POSITIVE) != dataset.len() && dataset.count(POSITIVE) != 0 {
        return Err(Error::Data(
            "gan training set must hold a single class".into(),
        ));
    }
    if dataset.image_size() != Some((cfg.image_size, cfg.image_size)) {
        return Err(Error::Data(format!(
            "gan expects {0}x{0} images, dataset has {1:?}",
            cfg.image_size,
            dataset.image_size()
        )));
    }
    Ok(())
}

/// Trains a fresh model on `dataset`; returns the trainer, whose `log` holds
/// one entry per step.
pub fn train_gan(
    dataset: &ImageDataset,
    config: &GanConfig,
    sink: &mut dyn GanSink,
) -> Result<GanTrainer> {
    config.validate()?;
    check_dataset(dataset, config)?;
    let mut trainer = GanTrainer::new(config, dataset.len())?;
    trainer.run(dataset, sink)?;
    Ok(trainer)
}
