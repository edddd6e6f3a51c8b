//! Acceptance gate: every criterion runs in order, prints one PASS/FAIL line,
//! and the process exits non-zero at the end if any criterion failed. Built
//! without the libtest harness so the lines are never captured.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use advsyn::checkpoint::{classifier_checkpoint, gan_checkpoint, Checkpoint};
use advsyn::classifier::{build_cnn, evaluate, train_network};
use advsyn::config::RunConfig;
use advsyn::data::{
    make_phantom_dataset, merge_and_balance, split, AugmentPolicy, ImageDataset, PhantomSpec,
    Provenance, NEGATIVE, POSITIVE,
};
use advsyn::dcgan::{
    generate_images, train_gan, GanConfig, GanModel, GanSink, GanTrainer, StepLosses,
};
use advsyn::eval::{
    classification_report, compare_images, uniform_noise_images, ConfusionMatrix, DEFAULT_BINS,
};
use advsyn::losses::{self, value};
use advsyn::nn::{Network, ParamStore};
use advsyn::optim::{adam_step, AdamConfig, AdamState};
use advsyn::pipeline::{self, evaluate_dataset, prepare_splits};
use advsyn::rng::stream;
use advsyn::tape::PROB_FLOOR;
use advsyn::{Rng, Tensor};
use indexmap::IndexMap;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Gate {
    results: Vec<(usize, &'static str, bool)>,
}

impl Gate {
    fn run(
        &mut self,
        id: usize,
        name: &'static str,
        limit: Option<Duration>,
        f: impl FnOnce() -> Outcome,
    ) {
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        let in_time = limit.is_none_or(|l| took <= l);
        let pass = out.pass && in_time;
        let budget = limit
            .map(|l| format!(" of {}s", l.as_secs()))
            .unwrap_or_default();
        println!(
            "{} criterion {id:>2} {name}: {} [{:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
        self.results.push((id, name, pass));
    }
}

/// Phantom data shared by the classifier criteria: 500 tumor and 500 clean
/// images at 32x32.
const CLF_SEED: u64 = 7;
/// Seed of the GAN run and of its 500 training positives.
const GAN_SEED: u64 = 11;

fn phantom(seed: u64, n_pos: usize, n_neg: usize) -> ImageDataset {
    let spec = PhantomSpec {
        image_size: 32,
        seed,
        ..PhantomSpec::default()
    };
    make_phantom_dataset(&spec, n_pos, n_neg).unwrap()
}

fn desk_run_config() -> RunConfig {
    let mut cfg = RunConfig {
        seed: CLF_SEED,
        ..RunConfig::default()
    };
    cfg.classifier.image_size = 32;
    cfg.classifier.max_epochs = 15;
    cfg.propagate_seed();
    cfg
}

/// Trains the default CNN on `real` plus `synthetic` positives. Returns the
/// held-out test accuracy, epochs run, training-portion size and the network.
fn desk_classifier(real: &ImageDataset, synthetic: &ImageDataset) -> (f64, usize, usize, Network) {
    let cfg = desk_run_config();
    let splits = prepare_splits(real, synthetic, &cfg).unwrap();
    let net = Network::new(
        build_cnn(&cfg.classifier).unwrap(),
        &mut Rng::new(cfg.seed, stream::WEIGHTS),
    )
    .unwrap();
    let (net, report) =
        train_network(net, &splits.fit, &splits.val, &cfg.classifier, &mut |_| {}).unwrap();
    let acc = evaluate_dataset(&net, &splits.test).unwrap().accuracy;
    (
        acc,
        report.epochs.len(),
        splits.fit.len() + splits.val.len(),
        net,
    )
}

fn gradient_suite() -> Outcome {
    let mut worst: (f64, &str) = (0.0, "");
    for op in common::GRADIENT_OPS {
        let err = common::op_gradient_error(op, common::CASES_PER_OP);
        if err > worst.0 {
            worst = (err, op);
        }
    }
    outcome(
        worst.0 <= common::FD_TOLERANCE,
        format!(
            "{} ops x {} shapes, max relative error {:.2e} ({})",
            common::GRADIENT_OPS.len(),
            common::CASES_PER_OP,
            worst.0,
            worst.1
        ),
    )
}

fn conv_oracle() -> Outcome {
    let err = common::conv_oracle_error(100);
    outcome(
        err <= 1e-12,
        format!("100 conv + 100 transposed cases, max abs difference {err:.2e}"),
    )
}

fn loss_identities() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let ld = value::discriminator_loss(&[0.5], &[0.5]).unwrap();
    let lg = value::generator_loss(&[0.5]).unwrap();
    let mut rng = Rng::new(3, 90);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = 1 + rng.below(8);
        let clamp = |p: f64| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let r: Vec<f64> = (0..n).map(|_| clamp(rng.uniform())).collect();
        let f: Vec<f64> = (0..n).map(|_| clamp(rng.uniform())).collect();
        let d = value::discriminator_loss(&r, &f).unwrap() + losses::gan_value(&r, &f).unwrap();
        worst = worst.max(d.abs());
    }
    let bce = value::binary_cross_entropy(&[1.0], &[1.0]).unwrap();
    let pass = (ld - 2.0 * ln2).abs() <= 1e-12
        && (lg - ln2).abs() <= 1e-12
        && worst <= 1e-12
        && bce == 0.0;
    outcome(
        pass,
        format!(
            "L_D(0.5,0.5)-2ln2 {:.1e}, L_G(0.5)-ln2 {:.1e}, max |L_D+V| {worst:.1e} over 1000 draws, BCE(1,1) {bce}",
            ld - 2.0 * ln2,
            lg - ln2
        ),
    )
}

fn adam_one_step() -> Outcome {
    let (lr, b1, b2, eps) = (0.0002, 0.5, 0.999, 1e-8);
    let mut store = ParamStore::default();
    store.params.insert("theta".into(), Tensor::scalar(0.0));
    let grads: IndexMap<String, Tensor> = [("theta".to_string(), Tensor::scalar(1.0))]
        .into_iter()
        .collect();
    let mut state = AdamState::new(AdamConfig {
        lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    });
    adam_step(&mut store, &grads, &mut state).unwrap();
    let got = store.params["theta"].item();
    // Hand recurrence from zero moments with g = 1.
    let m = (1.0 - b1) * 1.0;
    let v = (1.0 - b2) * 1.0;
    let m_hat = m / (1.0 - b1);
    let v_hat = v / (1.0 - b2);
    let want = 0.0 - lr * m_hat / (v_hat.sqrt() + eps);
    outcome(
        (got - want).abs() <= 1e-12 && state.t == 1,
        format!("theta_1 {got:.15e}, hand recurrence {want:.15e}"),
    )
}

fn table_arithmetic() -> Outcome {
    let r = classification_report(&ConfusionMatrix::new(375, 5, 0, 380)).unwrap();
    let r2 = |x: f64| (x * 100.0).round() / 100.0;
    let got = [
        r2(r.negative.precision.value),
        r2(r.positive.precision.value),
        r2(r.negative.recall.value),
        r2(r.positive.recall.value),
        r2(r.negative.f1.value),
        r2(r.positive.f1.value),
        r2(r.accuracy),
        r2(r.macro_avg.f1),
        r2(r.weighted_avg.f1),
    ];
    let printed = [1.00, 0.99, 0.99, 1.00, 0.99, 0.99, 0.99, 0.99, 0.99];
    let supports = (r.negative.support, r.positive.support, r.total);
    outcome(
        got == printed && supports == (380, 380, 760),
        format!(
            "precision {:.2}/{:.2}, recall {:.2}/{:.2}, f1 {:.2}/{:.2}, accuracy {:.2}, macro f1 {:.2}, weighted f1 {:.2}, supports {supports:?}",
            got[0], got[1], got[2], got[3], got[4], got[5], got[6], got[7], got[8]
        ),
    )
}

fn dataset_arithmetic() -> Outcome {
    let real = common::labeled_dataset(1500, 1500, 2, Provenance::Real);
    let mut synth = ImageDataset::new("synthetic");
    for i in 0..400 {
        synth
            .push(
                Tensor::full(&[1, 2, 2], i as f64 / 400.0),
                POSITIVE,
                Provenance::Synthetic,
            )
            .unwrap();
    }
    let merged = merge_and_balance(
        &real,
        &synth,
        &mut Rng::new(1, stream::AUGMENT),
        &AugmentPolicy::default(),
    )
    .unwrap();
    let (_, test) = split(&merged, 0.8, &mut Rng::new(1, stream::SPLIT)).unwrap();
    let counts = (
        merged.count(POSITIVE),
        merged.count(NEGATIVE),
        test.count(NEGATIVE),
        test.count(POSITIVE),
    );
    outcome(
        counts == (1900, 1900, 380, 380),
        format!(
            "merged {}/{} (yes/no), test {}+{} = {}",
            counts.0,
            counts.1,
            counts.2,
            counts.3,
            test.len()
        ),
    )
}

struct Trajectory<'a> {
    real: &'a [Tensor],
    jsd: Vec<(u64, f64)>,
}

impl GanSink for Trajectory<'_> {
    fn on_step(&mut self, _: u64, _: &StepLosses) -> advsyn::Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _: usize, trainer: &GanTrainer) -> advsyn::Result<()> {
        let fake = generate_images(
            &trainer.model,
            256,
            &mut Rng::new(GAN_SEED, stream::GENERATE),
        )?;
        let cmp = compare_images(self.real, fake.images(), DEFAULT_BINS)?;
        self.jsd.push((trainer.model.step, cmp.divergence));
        Ok(())
    }
}

fn gan_config() -> GanConfig {
    GanConfig {
        z_dim: 64,
        image_size: 32,
        batch_size: 16,
        epochs: 8,
        steps_per_epoch: 250,
        sample_every: 0,
        base_channels: 128,
        seed: GAN_SEED,
        ..GanConfig::default()
    }
}

fn gan_learning_signal(trained: &mut Option<GanTrainer>) -> Outcome {
    let positives = phantom(GAN_SEED, 500, 0);
    let real = &positives.images()[..256];
    let cfg = gan_config();
    let untrained = GanModel::new(&cfg).unwrap();
    let fake0 =
        generate_images(&untrained, 256, &mut Rng::new(GAN_SEED, stream::GENERATE)).unwrap();
    let jsd0 = compare_images(real, fake0.images(), DEFAULT_BINS)
        .unwrap()
        .divergence;
    let noise = uniform_noise_images(256, 32, &mut Rng::new(GAN_SEED, 99));
    let jsd_noise = compare_images(real, &noise, DEFAULT_BINS)
        .unwrap()
        .divergence;
    let mut sink = Trajectory {
        real,
        jsd: Vec::new(),
    };
    let trainer = train_gan(&positives, &cfg, &mut sink).unwrap();
    let (steps, jsd) = *sink.jsd.last().unwrap();
    *trained = Some(trainer);
    let trail: Vec<String> = sink
        .jsd
        .iter()
        .map(|(s, j)| format!("{s}:{j:.3}"))
        .collect();
    outcome(
        steps == 2000 && jsd <= jsd0 / 3.0 && jsd <= jsd_noise,
        format!(
            "JSD step 0 {jsd0:.4}, step {steps} {jsd:.4} (bound {:.4}), uniform noise {jsd_noise:.4}, trajectory [{}]",
            jsd0 / 3.0,
            trail.join(" ")
        ),
    )
}

fn mixed_parity(baseline: Option<f64>, gan: Option<&GanTrainer>) -> Outcome {
    let (Some(base), Some(gan)) = (baseline, gan) else {
        return outcome(false, "needs the desk classifier and GAN runs");
    };
    // Synthetic share as in the full-scale recipe: 400 generated per 1500 real tumors.
    let n_synth = 133;
    let synthetic = generate_images(
        &gan.model,
        n_synth,
        &mut Rng::new(CLF_SEED, stream::GENERATE),
    )
    .unwrap();
    let real = phantom(CLF_SEED, 500, 500);
    let (mixed, epochs, _, net) = desk_classifier(&real, &synthetic);
    let real_test = prepare_splits(&real, &ImageDataset::new("none"), &desk_run_config())
        .unwrap()
        .test;
    let on_real = evaluate_dataset(&net, &real_test).unwrap().accuracy;
    let gap = (mixed - base).abs() * 100.0;
    outcome(
        gap <= 5.0,
        format!(
            "real-only {base:.4}, real+{n_synth} synthetic {mixed:.4} ({epochs} epochs), gap {gap:.2} pp; mixed model on the real-only test split {on_real:.4}"
        ),
    )
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

/// Phantom data, GAN training, generation, classifier training, evaluation and
/// distribution comparison, all under `root`.
fn full_pipeline(root: &Path) {
    let at = |sub: &str| {
        let mut cfg = RunConfig {
            seed: 5,
            data_root: Some(root.join("data")),
            synth_dir: Some(root.join("synth")),
            out_dir: root.join(sub),
            synth_count: 8,
            ..RunConfig::default()
        };
        cfg.phantom.image_size = 32;
        cfg.gan = GanConfig {
            z_dim: 8,
            image_size: 32,
            epochs: 2,
            steps_per_epoch: 3,
            batch_size: 4,
            sample_every: 3,
            base_channels: 8,
            ..GanConfig::default()
        };
        cfg.classifier.image_size = 32;
        cfg.classifier.blocks = vec![(1, 4), (1, 8)];
        cfg.classifier.dense_units = 16;
        cfg.classifier.max_epochs = 2;
        cfg
    };
    pipeline::cmd_phantom(&at("data"), 20, 20).unwrap();
    pipeline::cmd_train_gan(&at("gan"), None).unwrap();
    pipeline::cmd_generate(
        &at("synth"),
        &root.join("gan").join(pipeline::GAN_FINAL_CHECKPOINT),
        8,
    )
    .unwrap();
    pipeline::cmd_train_clf(&at("clf")).unwrap();
    pipeline::cmd_evaluate(
        &at("eval"),
        &root.join("clf").join(pipeline::CLASSIFIER_CHECKPOINT),
        &root.join("clf/test"),
    )
    .unwrap();
    pipeline::cmd_compare_dist(
        &at("dist"),
        &root.join("data"),
        &root.join("synth"),
        DEFAULT_BINS,
        true,
    )
    .unwrap();
}

fn determinism(gan: Option<&GanTrainer>, clf: Option<&Network>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    full_pipeline(&root);
    let first = snapshot(&root);
    fs::remove_dir_all(&root).unwrap();
    full_pipeline(&root);
    let second = snapshot(&root);
    let differing: Vec<_> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();
    let kinds = ["ckpt", "csv", "pgm"].map(|ext| {
        first
            .keys()
            .filter(|k| k.extension().is_some_and(|e| e == ext))
            .count()
    });

    let mut resaved = true;
    for bytes in [
        gan.map(|t| gan_checkpoint(t).encode()),
        clf.map(|n| classifier_checkpoint(n, &desk_run_config().classifier, None).encode()),
    ]
    .into_iter()
    .flatten()
    {
        let path = dir.path().join("once.ckpt");
        fs::write(&path, &bytes).unwrap();
        let again = Checkpoint::load(&path).unwrap().encode();
        resaved &= again == bytes;
    }
    outcome(
        differing.is_empty() && kinds.iter().all(|&k| k > 0) && resaved && gan.is_some() && clf.is_some(),
        format!(
            "{} files ({} checkpoints, {} CSVs, {} images) identical across two runs: {}; save/load/save identical: {resaved}",
            first.len(),
            kinds[0],
            kinds[1],
            kinds[2],
            differing.is_empty()
        ),
    )
}

fn plateau_callbacks() -> Outcome {
    let cfg = common::plateau_config();
    let train = common::labeled_dataset(8, 8, 8, Provenance::Real);
    let val = common::labeled_dataset(4, 4, 8, Provenance::Real);
    let net = Network::new(
        build_cnn(&cfg).unwrap(),
        &mut Rng::new(cfg.seed, stream::WEIGHTS),
    )
    .unwrap();
    let (best, report) = train_network(net, &train, &val, &cfg, &mut |_| {}).unwrap();
    let lrs = report.lrs();
    let restored =
        evaluate(&best, &val).unwrap().0.to_bits() == report.epochs[0].val_loss.to_bits();
    outcome(
        lrs == common::PLATEAU_LRS && report.best_epoch == Some(1) && restored,
        format!(
            "lr {:?}, stop {:?} after {} epochs, best epoch {:?} restored: {restored}",
            lrs,
            report.stop_reason,
            lrs.len(),
            report.best_epoch
        ),
    )
}

fn main() {
    let mut gate = Gate {
        results: Vec::new(),
    };
    let secs = Duration::from_secs;

    gate.run(1, "gradient suite", Some(secs(60)), gradient_suite);
    gate.run(2, "convolution oracle", Some(secs(30)), conv_oracle);
    gate.run(3, "loss identities", None, loss_identities);
    gate.run(4, "Adam one-step oracle", None, adam_one_step);
    gate.run(5, "report arithmetic", None, table_arithmetic);
    gate.run(6, "dataset arithmetic", None, dataset_arithmetic);

    let mut baseline = None;
    let mut clf_net = None;
    gate.run(7, "desk-scale classifier", Some(secs(300)), || {
        let real = phantom(CLF_SEED, 500, 500);
        let (acc, epochs, n_train, net) = desk_classifier(&real, &ImageDataset::new("none"));
        baseline = Some(acc);
        clf_net = Some(net);
        outcome(
            acc >= 0.95,
            format!("test accuracy {acc:.4} after {epochs} epochs on {n_train} training images"),
        )
    });

    let mut gan = None;
    gate.run(8, "desk-scale GAN learning signal", Some(secs(900)), || {
        gan_learning_signal(&mut gan)
    });
    gate.run(9, "mixed-data parity", None, || {
        mixed_parity(baseline, gan.as_ref())
    });
    gate.run(10, "determinism", None, || {
        determinism(gan.as_ref(), clf_net.as_ref())
    });
    gate.run(11, "plateau callbacks", None, plateau_callbacks);

    let failed: Vec<_> = gate.results.iter().filter(|r| !r.2).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        gate.results.len() - failed.len(),
        gate.results.len()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
