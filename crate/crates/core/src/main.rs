use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use advsyn::config::RunConfig;
use advsyn::error::Result;
use advsyn::eval::DEFAULT_BINS;
use advsyn::pipeline;

/// DC-GAN synthesis and CNN classification of grayscale tumor images.
///
/// Settings come from the JSON file given by --config (every key optional,
/// defaults documented in the README); command-line flags override it.
/// Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
/// 4 numeric divergence.
#[derive(Parser, Debug)]
#[command(name = "advsyn", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream [default: 0, or the config value].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out, or the config value].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single-threaded execution. The engine is always serial; accepted for
    /// scripts that pass it.
    #[arg(long, global = true)]
    strict_serial: bool,
    /// Print training progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a procedural phantom dataset (yes/ and no/ PGM trees plus manifest).
    Phantom {
        /// Tumor images to draw.
        #[arg(long, default_value_t = 500)]
        n_yes: usize,
        /// Tumor-free images to draw.
        #[arg(long, default_value_t = 500)]
        n_no: usize,
        /// Image side in pixels [default: 32, or the config value].
        #[arg(long)]
        size: Option<usize>,
    },
    /// Resize and normalize a dataset directory to a square size.
    Preprocess {
        /// Source dataset directory.
        #[arg(long)]
        input: PathBuf,
        /// Target side in pixels [default: classifier image size].
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the GAN on the tumor images of a dataset.
    TrainGan {
        #[command(flatten)]
        gan: GanFlags,
        /// Continue from a GAN checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate synthetic tumor images from a GAN checkpoint.
    Generate {
        /// GAN checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 400)]
        n: usize,
    },
    /// Merge, balance, split and train the classifier.
    TrainClf {
        #[command(flatten)]
        clf: ClfFlags,
    },
    /// Score a classifier checkpoint on a dataset directory.
    Evaluate {
        /// Classifier checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory to score.
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare pixel-intensity histograms of real and synthetic images.
    CompareDist {
        /// Real dataset directory.
        #[arg(long)]
        real: PathBuf,
        /// Synthetic dataset directory.
        #[arg(long)]
        synth: PathBuf,
        /// Histogram bins over [-1, 1].
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Use every real image rather than only tumor images.
        #[arg(long)]
        all_classes: bool,
    },
}

#[derive(Args, Debug)]
struct GanFlags {
    /// Dataset directory [default: config data_root].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Image side: 32, 64 or 128 [default: 128].
    #[arg(long)]
    size: Option<usize>,
    /// Latent dimension [default: 400].
    #[arg(long)]
    z_dim: Option<usize>,
    /// Epochs [default: 10].
    #[arg(long)]
    epochs: Option<usize>,
    /// Steps per epoch [default: 3750].
    #[arg(long)]
    steps: Option<usize>,
    /// Batch size [default: 4].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Widest channel count [default: 256].
    #[arg(long)]
    base_channels: Option<usize>,
    /// Steps between sample grids, 0 for none [default: 375].
    #[arg(long)]
    sample_every: Option<usize>,
}

#[derive(Args, Debug)]
struct ClfFlags {
    /// Real dataset directory [default: config data_root].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of synthetic positives [default: config synth_dir].
    #[arg(long)]
    synth: Option<PathBuf>,
    /// Synthetic positives to merge, 0 for a real-only baseline [default: 400].
    #[arg(long)]
    synth_count: Option<usize>,
    /// Image side in pixels [default: 128].
    #[arg(long)]
    size: Option<usize>,
    /// Epoch limit [default: 200].
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Balance with augmentation before the train/test split.
    #[arg(long)]
    augment_before_split: bool,
    /// Expand each training class to this many images [default: none].
    #[arg(long)]
    balance_target: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.out_dir, cli.out);
    cfg.verbose = cli.verbose;
    match cli.command {
        Command::Phantom { n_yes, n_no, size } => {
            set(&mut cfg.phantom.image_size, size);
            let ds = pipeline::cmd_phantom(&cfg, n_yes, n_no)?;
            println!("wrote {} images to {}", ds.len(), cfg.out_dir.display());
        }
        Command::Preprocess { input, size } => {
            let size = size.unwrap_or(cfg.classifier.image_size);
            let ds = pipeline::cmd_preprocess(&cfg, &input, size)?;
            println!(
                "wrote {} images at {size}x{size} to {}",
                ds.len(),
                cfg.out_dir.display()
            );
        }
        Command::TrainGan { gan, resume } => {
            if gan.data.is_some() {
                cfg.data_root = gan.data;
            }
            let g = &mut cfg.gan;
            set(&mut g.image_size, gan.size);
            set(&mut g.z_dim, gan.z_dim);
            set(&mut g.epochs, gan.epochs);
            set(&mut g.steps_per_epoch, gan.steps);
            set(&mut g.batch_size, gan.batch_size);
            set(&mut g.base_channels, gan.base_channels);
            set(&mut g.sample_every, gan.sample_every);
            let trainer = pipeline::cmd_train_gan(&cfg, resume.as_deref())?;
            if let Some(last) = trainer.log.last() {
                println!(
                    "trained {} steps; final d_loss {} g_loss {}",
                    trainer.model.step, last.d_loss, last.g_loss
                );
            }
        }
        Command::Generate { checkpoint, n } => {
            let ds = pipeline::cmd_generate(&cfg, &checkpoint, n)?;
            println!(
                "wrote {} synthetic images to {}",
                ds.len(),
                cfg.out_dir.display()
            );
        }
        Command::TrainClf { clf } => {
            if clf.data.is_some() {
                cfg.data_root = clf.data;
            }
            if clf.synth.is_some() {
                cfg.synth_dir = clf.synth;
            }
            set(&mut cfg.synth_count, clf.synth_count);
            set(&mut cfg.classifier.image_size, clf.size);
            set(&mut cfg.classifier.max_epochs, clf.max_epochs);
            cfg.augment_before_split |= clf.augment_before_split;
            if clf.balance_target.is_some() {
                cfg.balance_target = clf.balance_target;
            }
            let out = pipeline::cmd_train_clf(&cfg)?;
            if let (Some(epoch), Some(loss)) = (out.report.best_epoch, out.report.best_val_loss) {
                println!(
                    "best epoch {epoch} of {} (val_loss {loss}); {} training, {} validation, {} test images",
                    out.report.epochs.len(),
                    out.splits.fit.len(),
                    out.splits.val.len(),
                    out.splits.test.len()
                );
            }
        }
        Command::Evaluate { checkpoint, data } => {
            let r = pipeline::cmd_evaluate(&cfg, &checkpoint, &data)?;
            let c = r.confusion;
            println!(
                "accuracy {:.4} on {} images (tn {} fp {} fn {} tp {})",
                r.accuracy, r.total, c.tn, c.fp, c.fn_, c.tp
            );
        }
        Command::CompareDist {
            real,
            synth,
            bins,
            all_classes,
        } => {
            let cmp = pipeline::cmd_compare_dist(&cfg, &real, &synth, bins, !all_classes)?;
            println!("jensen_shannon {}", cmp.divergence);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
