//! Binary classification metrics and pixel-intensity distribution comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default histogram resolution over `[-1, 1]`.
pub const DEFAULT_BINS: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionMatrix {
    pub fn new(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        ConfusionMatrix { tn, fp, fn_, tp }
    }

    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }
}

pub fn confusion_matrix(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (0, 0) => cm.tn += 1,
            (0, 1) => cm.fp += 1,
            (1, 0) => cm.fn_ += 1,
            (1, 1) => cm.tp += 1,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "non-binary label pair (truth {t}, prediction {p})"
                )))
            }
        }
    }
    Ok(cm)
}

/// A ratio whose denominator may be zero. Undefined ratios carry value 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rate {
    pub value: f64,
    pub undefined: bool,
}

impl Rate {
    fn ratio(num: u64, den: u64) -> Rate {
        if den == 0 {
            Rate {
                value: 0.0,
                undefined: true,
            }
        } else {
            Rate {
                value: num as f64 / den as f64,
                undefined: false,
            }
        }
    }

    fn harmonic(p: Rate, r: Rate) -> Rate {
        let s = p.value + r.value;
        if p.undefined || r.undefined || s == 0.0 {
            Rate {
                value: 0.0,
                undefined: true,
            }
        } else {
            Rate {
                value: 2.0 * p.value * r.value / s,
                undefined: false,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: Rate,
    pub recall: Rate,
    pub f1: Rate,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub negative: ClassMetrics,
    pub positive: ClassMetrics,
    pub accuracy: f64,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub total: u64,
    pub divergence: Option<f64>,
}

fn class_metrics(tp: u64, fp: u64, fn_: u64) -> ClassMetrics {
    let precision = Rate::ratio(tp, tp + fp);
    let recall = Rate::ratio(tp, tp + fn_);
    ClassMetrics {
        precision,
        recall,
        f1: Rate::harmonic(precision, recall),
        support: tp + fn_,
    }
}

/// Per-class precision, recall and F1 (the negative class treats `tn` as its
/// true positives), accuracy, and macro and support-weighted averages.
pub fn classification_report(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let negative = class_metrics(cm.tn, cm.fn_, cm.fp);
    let positive = class_metrics(cm.tp, cm.fp, cm.fn_);
    let avg = |w0: f64, w1: f64| Averages {
        precision: w0 * negative.precision.value + w1 * positive.precision.value,
        recall: w0 * negative.recall.value + w1 * positive.recall.value,
        f1: w0 * negative.f1.value + w1 * positive.f1.value,
    };
    let n = total as f64;
    Ok(EvalReport {
        confusion: *cm,
        negative,
        positive,
        accuracy: (cm.tp + cm.tn) as f64 / n,
        macro_avg: avg(0.5, 0.5),
        weighted_avg: avg(negative.support as f64 / n, positive.support as f64 / n),
        total,
        divergence: None,
    })
}

impl EvalReport {
    /// `class,precision,recall,f1,support` rows for each class, then accuracy,
    /// macro and weighted rows. Undefined rates are written as 0.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,precision,recall,f1,support\n");
        for (name, m) in [("no_tumor", &self.negative), ("tumor", &self.positive)] {
            let _ = writeln!(
                s,
                "{name},{},{},{},{}",
                m.precision.value, m.recall.value, m.f1.value, m.support
            );
        }
        let _ = writeln!(s, "accuracy,,,{},{}", self.accuracy, self.total);
        for (name, a) in [
            ("macro_avg", &self.macro_avg),
            ("weighted_avg", &self.weighted_avg),
        ] {
            let _ = writeln!(
                s,
                "{name},{},{},{},{}",
                a.precision, a.recall, a.f1, self.total
            );
        }
        s
    }

    /// Two-by-two matrix with actual classes as rows.
    pub fn confusion_csv(&self) -> String {
        let c = &self.confusion;
        format!(
            "actual,predicted_no_tumor,predicted_tumor\nno_tumor,{},{}\ntumor,{},{}\n",
            c.tn, c.fp, c.fn_, c.tp
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.csv", self.to_csv()),
            ("confusion.csv", self.confusion_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("report.json");
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))
    }
}

/// Normalized histogram of pixel values over `[-1, 1]` with equal-width bins,
/// each closed on the left; the last bin also includes `1`. Values outside the
/// range are clamped into the end bins.
pub fn intensity_histogram<'a>(
    images: impl IntoIterator<Item = &'a Tensor>,
    bins: usize,
) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "histogram needs >= 2 bins, got {bins}"
        )));
    }
    let mut counts = vec![0u64; bins];
    let mut n = 0u64;
    for t in images {
        for &v in t.data() {
            let i = ((v + 1.0) / 2.0 * bins as f64).floor();
            let i = if i.is_nan() {
                0
            } else {
                (i.max(0.0) as usize).min(bins - 1)
            };
            counts[i] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("histogram of zero pixels".into()));
    }
    Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
}

pub fn bin_centers(bins: usize) -> Vec<f64> {
    let w = 2.0 / bins as f64;
    (0..bins).map(|i| -1.0 + (i as f64 + 0.5) * w).collect()
}

/// Jensen-Shannon divergence in nats. Each bin contributes
/// `(p ln(p/m) + q ln(q/m)) / 2` with `m = (p + q) / 2`, so swapping the
/// arguments gives a bit-identical result.
pub fn histogram_divergence(h1: &[f64], h2: &[f64]) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(Error::InvalidArgument(format!(
            "histograms have {} and {} bins",
            h1.len(),
            h2.len()
        )));
    }
    for h in [h1, h2] {
        let s: f64 = h.iter().sum();
        if (s - 1.0).abs() > 1e-9 || h.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "histogram is not a distribution (sum {s})"
            )));
        }
    }
    let term = |p: f64, m: f64| if p > 0.0 { p * (p / m).ln() } else { 0.0 };
    let mut js = 0.0;
    for (&p, &q) in h1.iter().zip(h2) {
        let m = (p + q) / 2.0;
        js += (term(p, m) + term(q, m)) / 2.0;
    }
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistributionComparison {
    pub divergence: f64,
    pub bin_centers: Vec<f64>,
    pub real: Vec<f64>,
    pub synthetic: Vec<f64>,
}

impl DistributionComparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_center,real,synthetic\n");
        for i in 0..self.real.len() {
            let _ = writeln!(
                s,
                "{},{},{}",
                self.bin_centers[i], self.real[i], self.synthetic[i]
            );
        }
        s
    }
}

pub fn compare_real_synthetic(
    real: &ImageDataset,
    synthetic: &ImageDataset,
    bins: usize,
) -> Result<DistributionComparison> {
    compare_images(real.images(), synthetic.images(), bins)
}

pub fn compare_images(
    real: &[Tensor],
    synthetic: &[Tensor],
    bins: usize,
) -> Result<DistributionComparison> {
    if real.is_empty() || synthetic.is_empty() {
        return Err(Error::InvalidArgument(
            "distribution comparison needs non-empty real and synthetic sets".into(),
        ));
    }
    let hr = intensity_histogram(real, bins)?;
    let hs = intensity_histogram(synthetic, bins)?;
    Ok(DistributionComparison {
        divergence: histogram_divergence(&hr, &hs)?,
        bin_centers: bin_centers(bins),
        real: hr,
        synthetic: hs,
    })
}

/// `n` images of i.i.d. uniform pixels in `[-1, 1]`, a no-skill baseline for
/// distribution comparisons.
pub fn uniform_noise_images(n: usize, size: usize, rng: &mut Rng) -> Vec<Tensor> {
    (0..n)
        .map(|_| Tensor::from_fn(&[1, size, size], |_| rng.uniform_range(-1.0, 1.0)))
        .collect()
}
