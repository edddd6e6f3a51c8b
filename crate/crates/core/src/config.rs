//! Run configuration: one JSON document holding every hyperparameter.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::data::{AugmentPolicy, PhantomSpec};
use crate::dcgan::GanConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. It replaces the `seed` field of every nested section.
    pub seed: u64,
    /// Real dataset directory.
    pub data_root: Option<PathBuf>,
    /// Directory of generated positives merged into classifier training.
    pub synth_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub gan: GanConfig,
    pub classifier: ClassifierConfig,
    pub phantom: PhantomSpec,
    pub augment: AugmentPolicy,
    /// Balance with augmentation before the train/test split instead of
    /// inside the training portion only.
    pub augment_before_split: bool,
    /// How many synthetic positives to take from `synth_dir`.
    pub synth_count: usize,
    /// If set, both training classes are expanded by augmentation to this
    /// many images each.
    pub balance_target: Option<usize>,
    pub train_fraction: f64,
    /// Share of the training portion held out for callbacks.
    pub val_fraction: f64,
    #[serde(skip)]
    pub verbose: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_root: None,
            synth_dir: None,
            out_dir: PathBuf::from("out"),
            gan: GanConfig::default(),
            classifier: ClassifierConfig::default(),
            phantom: PhantomSpec::default(),
            augment: AugmentPolicy::default(),
            augment_before_split: false,
            synth_count: 400,
            balance_target: None,
            train_fraction: 0.8,
            val_fraction: 0.1,
            verbose: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Copies the master seed into every section.
    pub fn propagate_seed(&mut self) {
        self.gan.seed = self.seed;
        self.classifier.seed = self.seed;
        self.phantom.seed = self.seed;
    }

    /// Checks every range constraint; paths are checked by the commands that
    /// use them.
    pub fn validate(&self) -> Result<()> {
        self.gan.validate()?;
        self.classifier.validate()?;
        self.phantom.validate()?;
        let p = &self.augment;
        if !(0.0..=1.0).contains(&p.flip_probability)
            || !(p.max_rotation_deg >= 0.0 && p.max_rotation_deg <= 180.0)
            || !(p.max_brightness_shift >= 0.0 && p.max_brightness_shift <= 2.0)
        {
            return Err(Error::Config(format!("augment policy out of range: {p:?}")));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0,1]",
                self.train_fraction
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0,1)",
                self.val_fraction
            )));
        }
        if self.balance_target == Some(0) {
            return Err(Error::Config("balance_target must be >= 1".into()));
        }
        Ok(())
    }
}
