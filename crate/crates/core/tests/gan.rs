//! Adversarial trainer contracts on small configurations.

use advsyn::checkpoint::{gan_checkpoint, restore_gan, Checkpoint};
use advsyn::data::{make_phantom_dataset, PhantomSpec, Provenance, POSITIVE};
use advsyn::dcgan::{
    generate_images, train_gan, GanConfig, GanModel, GanSink, GanTrainer, NullSink, StepLosses,
};
use advsyn::rng::stream;
use advsyn::{Rng, Tensor};

fn small_config(seed: u64) -> GanConfig {
    GanConfig {
        z_dim: 8,
        image_size: 32,
        epochs: 2,
        steps_per_epoch: 3,
        batch_size: 4,
        sample_every: 0,
        base_channels: 16,
        seed,
        ..GanConfig::default()
    }
}

fn phantom_positives(n: usize, seed: u64) -> advsyn::data::ImageDataset {
    let spec = PhantomSpec {
        image_size: 32,
        seed,
        ..PhantomSpec::default()
    };
    make_phantom_dataset(&spec, n, 0).unwrap()
}

#[test]
fn each_phase_leaves_the_other_network_untouched() {
    let cfg = small_config(3);
    let data = phantom_positives(8, 3);
    let real = data.batch(&[0, 1, 2, 3]).unwrap();
    let mut model = GanModel::new(&cfg).unwrap();
    let mut rng = Rng::new(3, stream::NOISE);

    let (g0, d0) = (
        model.generator.store.to_bytes(),
        model.discriminator.store.to_bytes(),
    );
    model.discriminator_step(&real, &mut rng).unwrap();
    assert_eq!(model.generator.store.to_bytes(), g0);
    assert_ne!(model.discriminator.store.to_bytes(), d0);
    assert_eq!(model.g_opt.t, 0);

    let d1 = model.discriminator.store.to_bytes();
    model.generator_step(4, &mut rng).unwrap();
    assert_eq!(model.discriminator.store.to_bytes(), d1);
    assert_ne!(model.generator.store.to_bytes(), g0);
    assert_eq!((model.d_opt.t, model.g_opt.t), (1, 1));
}

#[test]
fn alternation_holds_with_batchnorm_buffers() {
    let cfg = GanConfig {
        batchnorm: true,
        ..small_config(4)
    };
    let data = phantom_positives(4, 4);
    let real = data.batch(&[0, 1, 2, 3]).unwrap();
    let mut model = GanModel::new(&cfg).unwrap();
    let mut rng = Rng::new(4, stream::NOISE);
    let g0 = model.generator.store.to_bytes();
    model.discriminator_step(&real, &mut rng).unwrap();
    assert_eq!(model.generator.store.to_bytes(), g0);
    let d1 = model.discriminator.store.to_bytes();
    model.generator_step(4, &mut rng).unwrap();
    assert_eq!(model.discriminator.store.to_bytes(), d1);
}

#[test]
fn train_step_is_the_two_phases_in_order() {
    let cfg = small_config(5);
    let data = phantom_positives(4, 5);
    let real = data.batch(&[0, 1, 2, 3]).unwrap();
    let mut a = GanModel::new(&cfg).unwrap();
    let mut b = a.clone();
    let (mut ra, mut rb) = (Rng::new(5, stream::NOISE), Rng::new(5, stream::NOISE));
    let losses = a.train_step(&real, &mut ra).unwrap();
    let d = b.discriminator_step(&real, &mut rb).unwrap();
    let g = b.generator_step(4, &mut rb).unwrap();
    assert_eq!((losses.d_loss, losses.g_loss), (d, g));
    assert_eq!(a.generator, b.generator);
    assert_eq!(a.discriminator, b.discriminator);
    assert_eq!(a.step, 1);
}

#[test]
fn first_step_discriminator_loss_is_near_two_ln_two() {
    let cfg = GanConfig {
        z_dim: 64,
        batch_size: 16,
        base_channels: 32,
        ..small_config(6)
    };
    let data = phantom_positives(16, 6);
    let idx: Vec<usize> = (0..16).collect();
    let mut model = GanModel::new(&cfg).unwrap();
    let l = model
        .train_step(&data.batch(&idx).unwrap(), &mut Rng::new(6, stream::NOISE))
        .unwrap();
    let target = 2.0 * std::f64::consts::LN_2;
    assert!((l.d_loss - target).abs() <= 0.7, "d_loss {}", l.d_loss);
}

#[test]
fn discriminator_separates_bright_images_from_a_frozen_blank_generator() {
    let cfg = GanConfig {
        z_dim: 4,
        batch_size: 8,
        base_channels: 16,
        ..small_config(7)
    };
    let mut model = GanModel::new(&cfg).unwrap();
    for t in model.generator.store.params.values_mut() {
        *t = Tensor::zeros(t.shape());
    }
    // Zero learning rate freezes the generator: Adam moves parameters by lr times
    // a bounded ratio.
    model.g_opt.config.lr = 0.0;
    let real = Tensor::full(&[8, 1, 32, 32], 1.0);
    let mut rng = Rng::new(7, stream::NOISE);
    let g0 = model.generator.store.to_bytes();
    let mut reached = None;
    for step in 1..=200 {
        let l = model.train_step(&real, &mut rng).unwrap();
        if l.d_loss < 0.1 {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "d_loss never fell below 0.1");
    assert_eq!(model.generator.store.to_bytes(), g0);
}

#[test]
fn a_batch_of_zeros_gives_finite_losses() {
    let cfg = small_config(8);
    let mut model = GanModel::new(&cfg).unwrap();
    let l = model
        .train_step(
            &Tensor::zeros(&[4, 1, 32, 32]),
            &mut Rng::new(8, stream::NOISE),
        )
        .unwrap();
    assert!(l.d_loss.is_finite() && l.g_loss.is_finite());
}

#[test]
fn wrong_batch_shape_is_rejected() {
    let mut model = GanModel::new(&small_config(8)).unwrap();
    let err = model
        .train_step(
            &Tensor::zeros(&[4, 1, 16, 16]),
            &mut Rng::new(8, stream::NOISE),
        )
        .unwrap_err();
    assert!(matches!(err, advsyn::Error::Shape(_)), "{err}");
}

#[derive(Default)]
struct Recorder {
    steps: Vec<u64>,
    samples: Vec<u64>,
    epochs: Vec<usize>,
}

impl GanSink for Recorder {
    fn on_step(&mut self, step: u64, _: &StepLosses) -> advsyn::Result<()> {
        self.steps.push(step);
        Ok(())
    }

    fn on_samples(&mut self, step: u64, grid: &Tensor) -> advsyn::Result<()> {
        assert_eq!(grid.shape(), &[1, 128, 128]);
        self.samples.push(step);
        Ok(())
    }

    fn on_epoch_end(&mut self, epoch: usize, _: &GanTrainer) -> advsyn::Result<()> {
        self.epochs.push(epoch);
        Ok(())
    }
}

#[test]
fn log_is_complete_and_the_dataset_is_recycled() {
    // 3 images but 2 * 3 * 4 = 24 draws: the sampler must cycle.
    let cfg = GanConfig {
        sample_every: 2,
        ..small_config(9)
    };
    let data = phantom_positives(3, 9);
    let mut rec = Recorder::default();
    let trainer = train_gan(&data, &cfg, &mut rec).unwrap();
    assert_eq!(trainer.log.len(), 6);
    assert!(trainer
        .log
        .iter()
        .all(|l| l.d_loss.is_finite() && l.g_loss.is_finite()));
    assert_eq!(rec.steps, vec![1, 2, 3, 4, 5, 6]);
    assert_eq!(rec.samples, vec![2, 4, 6]);
    assert_eq!(rec.epochs, vec![1, 2]);
}

#[test]
fn zero_epochs_returns_the_initial_model_and_an_empty_log() {
    let cfg = GanConfig {
        epochs: 0,
        ..small_config(10)
    };
    let trainer = train_gan(&phantom_positives(4, 10), &cfg, &mut NullSink).unwrap();
    assert!(trainer.log.is_empty());
    assert_eq!(trainer.model, GanModel::new(&cfg).unwrap());
}

#[test]
fn empty_and_mixed_datasets_are_rejected() {
    let cfg = small_config(11);
    let empty = advsyn::data::ImageDataset::new("empty");
    assert!(train_gan(&empty, &cfg, &mut NullSink).is_err());
    let spec = PhantomSpec {
        image_size: 32,
        ..PhantomSpec::default()
    };
    let mixed = make_phantom_dataset(&spec, 2, 2).unwrap();
    assert!(train_gan(&mixed, &cfg, &mut NullSink).is_err());
}

#[test]
fn equal_seeds_give_identical_logs_and_images() {
    let cfg = small_config(12);
    let data = phantom_positives(6, 12);
    let a = train_gan(&data, &cfg, &mut NullSink).unwrap();
    let b = train_gan(&data, &cfg, &mut NullSink).unwrap();
    assert_eq!(a, b);
    let ia = generate_images(&a.model, 5, &mut Rng::new(1, stream::GENERATE)).unwrap();
    let ib = generate_images(&b.model, 5, &mut Rng::new(1, stream::GENERATE)).unwrap();
    assert_eq!(ia, ib);
    let other = train_gan(&data, &small_config(13), &mut NullSink).unwrap();
    assert_ne!(a.log, other.log);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let full_cfg = small_config(14);
    let data = phantom_positives(5, 14);
    let full = train_gan(&data, &full_cfg, &mut NullSink).unwrap();

    let half_cfg = GanConfig {
        epochs: 1,
        ..full_cfg.clone()
    };
    let half = train_gan(&data, &half_cfg, &mut NullSink).unwrap();
    let bytes = gan_checkpoint(&half).encode();
    let mut resumed = restore_gan(&Checkpoint::decode(&bytes, "mem".as_ref()).unwrap()).unwrap();
    resumed.model.config.epochs = 2;
    resumed.run(&data, &mut NullSink).unwrap();
    assert_eq!(resumed, full);
}

#[test]
fn generated_images_are_synthetic_positives_in_range() {
    let model = GanModel::new(&small_config(15)).unwrap();
    let ds = generate_images(&model, 70, &mut Rng::new(15, stream::GENERATE)).unwrap();
    assert_eq!(ds.len(), 70);
    assert!(ds.labels().iter().all(|&l| l == POSITIVE));
    assert!(ds.provenance().iter().all(|&p| p == Provenance::Synthetic));
    for img in ds.images() {
        assert_eq!(img.shape(), &[1, 32, 32]);
        assert!(img.min() >= -1.0 && img.max() <= 1.0);
    }
    assert!(generate_images(&model, 0, &mut Rng::new(15, stream::GENERATE)).is_err());
}

#[test]
fn discriminator_of_generator_is_a_probability_for_every_size() {
    for size in [32, 64, 128] {
        let cfg = GanConfig {
            image_size: size,
            base_channels: 8,
            ..small_config(16)
        };
        let model = GanModel::new(&cfg).unwrap();
        let z = Tensor::from_fn(&[2, cfg.z_dim], |i| (i as f64 * 0.37).sin());
        let fake = model.generate_from(&z).unwrap();
        assert_eq!(fake.shape(), &[2, 1, size, size]);
        let p = model.discriminator.infer(&fake).unwrap();
        assert_eq!(p.shape(), &[2, 1]);
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
