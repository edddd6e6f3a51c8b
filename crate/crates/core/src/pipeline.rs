//! The end-to-end commands behind the CLI. Each reads and writes plain files
//! so runs can be chained, inspected and repeated.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::{
    classifier_checkpoint, gan_checkpoint, restore_classifier, restore_gan, Checkpoint,
};
use crate::classifier::{build_cnn, predict, train_network, TrainReport};
use crate::config::RunConfig;
use crate::data::io::{load_dataset, read_dir, write_dataset};
use crate::data::{
    augment, make_phantom_dataset, merge_and_balance, preprocess_image, split, to_gray,
    ImageDataset, Provenance, NEGATIVE, POSITIVE,
};
use crate::dcgan::{generate_images, GanSink, GanTrainer, StepLosses};
use crate::error::{Error, Result};
use crate::eval::{
    classification_report, compare_real_synthetic, confusion_matrix, DistributionComparison,
    EvalReport,
};
use crate::nn::Network;
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

pub const CLASSIFIER_CHECKPOINT: &str = "clf_best.ckpt";
pub const GAN_FINAL_CHECKPOINT: &str = "gan_final.ckpt";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn require_dir(path: Option<&Path>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| Error::Config(format!("{what} directory not set")))?;
    if !p.is_dir() {
        return Err(Error::Config(format!(
            "{what} directory {} does not exist",
            p.display()
        )));
    }
    Ok(p.to_path_buf())
}

fn prepared(cfg: &RunConfig) -> Result<RunConfig> {
    let mut cfg = cfg.clone();
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn save_effective_config(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("run_config.json"), &cfg.to_json())
}

/// Writes `n_yes` tumor and `n_no` clean phantom images to the output directory.
pub fn cmd_phantom(cfg: &RunConfig, n_yes: usize, n_no: usize) -> Result<ImageDataset> {
    let cfg = prepared(cfg)?;
    let ds = make_phantom_dataset(&cfg.phantom, n_yes, n_no)?;
    create_dir(&cfg.out_dir)?;
    write_dataset(&cfg.out_dir, &ds, "phantom")?;
    Ok(ds)
}

/// Resizes and normalizes every image under `input` to `size`, then writes
/// the result (requantized to 8 bits) to the output directory.
pub fn cmd_preprocess(cfg: &RunConfig, input: &Path, size: usize) -> Result<ImageDataset> {
    let cfg = prepared(cfg)?;
    let input = require_dir(Some(input), "input")?;
    let mut ds = ImageDataset::new("preprocessed");
    for entry in read_dir(&input)? {
        ds.push(
            preprocess_image(&entry.image, size)?,
            entry.label,
            entry.provenance,
        )?;
    }
    create_dir(&cfg.out_dir)?;
    write_dataset(&cfg.out_dir, &ds, "img")?;
    Ok(ds)
}

struct DirSink {
    out: PathBuf,
    losses: BufWriter<File>,
    verbose: bool,
    total: u64,
}

impl DirSink {
    fn new(out: &Path, previous: &[StepLosses], verbose: bool, total: u64) -> Result<Self> {
        let path = out.join("gan_loss.csv");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut sink = DirSink {
            out: out.to_path_buf(),
            losses: BufWriter::new(file),
            verbose,
            total,
        };
        sink.line("step,d_loss,g_loss")?;
        for (i, l) in previous.iter().enumerate() {
            sink.line(&format!("{},{},{}", i + 1, l.d_loss, l.g_loss))?;
        }
        Ok(sink)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        let path = self.out.join("gan_loss.csv");
        writeln!(self.losses, "{s}").map_err(|e| Error::io(path, e))
    }

    fn finish(mut self) -> Result<()> {
        let path = self.out.join("gan_loss.csv");
        self.losses.flush().map_err(|e| Error::io(path, e))
    }
}

impl GanSink for DirSink {
    fn on_step(&mut self, step: u64, l: &StepLosses) -> Result<()> {
        self.line(&format!("{step},{},{}", l.d_loss, l.g_loss))?;
        if self.verbose && (step.is_multiple_of(100) || step == self.total) {
            eprintln!(
                "step {step}/{}: d_loss {:.4} g_loss {:.4}",
                self.total, l.d_loss, l.g_loss
            );
        }
        Ok(())
    }

    fn on_samples(&mut self, step: u64, grid: &Tensor) -> Result<()> {
        let path = self.out.join(format!("samples_step_{step:06}.pgm"));
        crate::data::pgm::save_image(&path, &to_gray(grid)?)
    }

    fn on_epoch_end(&mut self, epoch: usize, trainer: &GanTrainer) -> Result<()> {
        gan_checkpoint(trainer).save(&self.out.join(format!("gan_epoch_{epoch}.ckpt")))
    }
}

/// Trains the GAN on the positives under `data_root`, optionally continuing
/// from `resume`. The resumed run may extend `epochs`; every other GAN
/// setting must match the checkpoint.
pub fn cmd_train_gan(cfg: &RunConfig, resume: Option<&Path>) -> Result<GanTrainer> {
    let cfg = prepared(cfg)?;
    let root = require_dir(cfg.data_root.as_deref(), "data")?;
    let data = load_dataset(&root, cfg.gan.image_size)?.with_label(POSITIVE);
    if data.is_empty() {
        return Err(Error::Data(format!(
            "no tumor images under {}",
            root.display()
        )));
    }
    let mut trainer = match resume {
        Some(path) => {
            let mut t = restore_gan(&Checkpoint::load(path)?)?;
            let mut want = cfg.gan.clone();
            want.epochs = t.model.config.epochs;
            if want != t.model.config {
                return Err(Error::Config(format!(
                    "{} was trained with a different GAN configuration",
                    path.display()
                )));
            }
            t.model.config.epochs = cfg.gan.epochs;
            t
        }
        None => GanTrainer::new(&cfg.gan, data.len())?,
    };
    save_effective_config(&cfg)?;
    let mut sink = DirSink::new(
        &cfg.out_dir,
        &trainer.log,
        cfg.verbose,
        cfg.gan.total_steps(),
    )?;
    trainer.run(&data, &mut sink)?;
    sink.finish()?;
    gan_checkpoint(&trainer).save(&cfg.out_dir.join(GAN_FINAL_CHECKPOINT))?;
    Ok(trainer)
}

/// Writes `n` generated positives, drawn with the run seed, to the output directory.
pub fn cmd_generate(cfg: &RunConfig, checkpoint: &Path, n: usize) -> Result<ImageDataset> {
    let cfg = prepared(cfg)?;
    let trainer = restore_gan(&Checkpoint::load(checkpoint)?)?;
    let ds = generate_images(&trainer.model, n, &mut Rng::new(cfg.seed, stream::GENERATE))?;
    create_dir(&cfg.out_dir)?;
    write_dataset(&cfg.out_dir, &ds, "synth")?;
    Ok(ds)
}

/// Training, validation and test portions for the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub fit: ImageDataset,
    pub val: ImageDataset,
    pub test: ImageDataset,
}

/// Merges, balances, splits and carves validation from `real` plus
/// `synthetic` positives.
///
/// By default the train/test split happens first and class balancing by
/// augmentation touches only the training portion. With
/// `augment_before_split` the merged set is balanced first, so augmented
/// copies can land in the test set.
pub fn prepare_splits(
    real: &ImageDataset,
    synthetic: &ImageDataset,
    cfg: &RunConfig,
) -> Result<Splits> {
    let mut split_rng = Rng::new(cfg.seed, stream::SPLIT);
    let mut aug_rng = Rng::new(cfg.seed, stream::AUGMENT);
    let empty = ImageDataset::new("none");
    let (train, test) = if cfg.augment_before_split {
        let merged = merge_and_balance(real, synthetic, &mut aug_rng, &cfg.augment)?;
        split(&merged, cfg.train_fraction, &mut split_rng)?
    } else {
        let mut combined = real.clone();
        combined.extend(synthetic)?;
        split(&combined, cfg.train_fraction, &mut split_rng)?
    };
    let (fit, val) = split(&train, 1.0 - cfg.val_fraction, &mut split_rng)?;
    let mut fit = if cfg.augment_before_split {
        fit
    } else {
        merge_and_balance(&fit, &empty, &mut aug_rng, &cfg.augment)?
    };
    if let Some(target) = cfg.balance_target {
        let mut expanded = ImageDataset::new("fit");
        for label in [NEGATIVE, POSITIVE] {
            let class = fit.with_label(label);
            if class.len() > target {
                return Err(Error::Config(format!(
                    "balance_target {target} is below the {} images already in class {label}",
                    class.len()
                )));
            }
            expanded.extend(&class)?;
            expanded.extend(&augment(
                &class,
                target - class.len(),
                &mut aug_rng,
                &cfg.augment,
            )?)?;
        }
        let order = aug_rng.permutation(expanded.len());
        fit = expanded.subset(&order, "fit");
    }
    Ok(Splits { fit, val, test })
}

#[derive(Clone, Debug)]
pub struct TrainClfOutcome {
    pub network: Network,
    pub report: TrainReport,
    pub splits: Splits,
}

fn load_synthetic(cfg: &RunConfig, size: usize) -> Result<ImageDataset> {
    let Some(dir) = cfg.synth_dir.as_deref() else {
        return Ok(ImageDataset::new("synthetic"));
    };
    if cfg.synth_count == 0 {
        return Ok(ImageDataset::new("synthetic"));
    }
    let dir = require_dir(Some(dir), "synthetic")?;
    let all = load_dataset(&dir, size)?;
    if all.count(NEGATIVE) > 0 {
        return Err(Error::Data(format!(
            "{} holds negatives; synthetic images must be positives",
            dir.display()
        )));
    }
    if all.len() < cfg.synth_count {
        return Err(Error::Data(format!(
            "synth_count {} but {} holds only {} images",
            cfg.synth_count,
            dir.display(),
            all.len()
        )));
    }
    Ok(all.take(cfg.synth_count))
}

/// Merge, balance, split, train. Writes the best checkpoint, the per-epoch
/// report and the held-out test set (`test/`) to the output directory.
pub fn cmd_train_clf(cfg: &RunConfig) -> Result<TrainClfOutcome> {
    let cfg = prepared(cfg)?;
    let root = require_dir(cfg.data_root.as_deref(), "data")?;
    let size = cfg.classifier.image_size;
    let real = load_dataset(&root, size)?;
    if real.count(POSITIVE) == 0 || real.count(NEGATIVE) == 0 {
        return Err(Error::Data(format!(
            "{} must contain both yes and no images",
            root.display()
        )));
    }
    let synthetic = load_synthetic(&cfg, size)?;
    let splits = prepare_splits(&real, &synthetic, &cfg)?;
    save_effective_config(&cfg)?;

    let net = Network::new(
        build_cnn(&cfg.classifier)?,
        &mut Rng::new(cfg.seed, stream::WEIGHTS),
    )?;
    let verbose = cfg.verbose;
    let (network, report) =
        train_network(net, &splits.fit, &splits.val, &cfg.classifier, &mut |r| {
            if verbose {
                eprintln!(
                    "epoch {}: loss {:.4} acc {:.3} val_loss {:.4} val_acc {:.3} lr {}",
                    r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
                );
            }
        })?;
    classifier_checkpoint(&network, &cfg.classifier, Some(&report))
        .save(&cfg.out_dir.join(CLASSIFIER_CHECKPOINT))?;
    write_file(&cfg.out_dir.join("train_report.csv"), &report.to_csv())?;
    let test_dir = cfg.out_dir.join("test");
    if test_dir.exists() {
        fs::remove_dir_all(&test_dir).map_err(|e| Error::io(&test_dir, e))?;
    }
    write_dataset(&test_dir, &splits.test, "test")?;
    Ok(TrainClfOutcome {
        network,
        report,
        splits,
    })
}

/// Metrics of `network` on `data`.
pub fn evaluate_dataset(network: &Network, data: &ImageDataset) -> Result<EvalReport> {
    let (_, pred) = predict(network, data.images())?;
    classification_report(&confusion_matrix(data.labels(), &pred)?)
}

/// Scores the classifier checkpoint on a dataset directory and writes
/// `report.csv`, `confusion.csv` and `report.json`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let cfg = prepared(cfg)?;
    let data = require_dir(Some(data), "evaluation data")?;
    let (network, clf) = restore_classifier(&Checkpoint::load(checkpoint)?)?;
    let ds = load_dataset(&data, clf.image_size)?;
    if ds.is_empty() {
        return Err(Error::Data(format!("no images under {}", data.display())));
    }
    let report = evaluate_dataset(&network, &ds)?;
    report.write(&cfg.out_dir)?;
    Ok(report)
}

/// Histogram comparison of real and synthetic directories. With
/// `positives_only` just the tumor images of `real` are used. Synthetic
/// images are resized to the real image size.
pub fn cmd_compare_dist(
    cfg: &RunConfig,
    real: &Path,
    synthetic: &Path,
    bins: usize,
    positives_only: bool,
) -> Result<DistributionComparison> {
    let cfg = prepared(cfg)?;
    let real = require_dir(Some(real), "real")?;
    let synthetic = require_dir(Some(synthetic), "synthetic")?;
    let raw = read_dir(&real)?;
    let size = raw
        .first()
        .map(|e| e.image.width)
        .ok_or_else(|| Error::Data(format!("no images under {}", real.display())))?;
    let mut real_ds = ImageDataset::new("real");
    for e in raw
        .into_iter()
        .filter(|e| !positives_only || e.label == POSITIVE)
    {
        real_ds.push(preprocess_image(&e.image, size)?, e.label, e.provenance)?;
    }
    let synth_ds = load_dataset(&synthetic, size)?;
    let cmp = compare_real_synthetic(&real_ds, &synth_ds, bins)?;
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("distribution.csv"), &cmp.to_csv())?;
    write_file(
        &cfg.out_dir.join("divergence.csv"),
        &format!("metric,value\njensen_shannon,{}\n", cmp.divergence),
    )?;
    Ok(cmp)
}

/// Image counts per provenance.
pub fn provenance_counts(ds: &ImageDataset) -> [(Provenance, usize); 3] {
    [
        Provenance::Real,
        Provenance::Synthetic,
        Provenance::Augmented,
    ]
    .map(|p| (p, ds.provenance().iter().filter(|&&q| q == p).count()))
}
