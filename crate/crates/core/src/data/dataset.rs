use std::fmt;
use std::str::FromStr;

use crate::data::augment::{augment, AugmentPolicy};
use crate::data::pgm::GrayImage;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NEGATIVE: u8 = 0;
pub const POSITIVE: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Real,
    Synthetic,
    Augmented,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
            Provenance::Augmented => "augmented",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Provenance::Real),
            "synthetic" => Ok(Provenance::Synthetic),
            "augmented" => Ok(Provenance::Augmented),
            other => Err(Error::Data(format!("unknown provenance {other:?}"))),
        }
    }
}

/// Grayscale images in `[-1, 1]`, each `[1, H, W]`, with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub name: String,
    images: Vec<Tensor>,
    labels: Vec<u8>,
    provenance: Vec<Provenance>,
}

impl ImageDataset {
    pub fn new(name: impl Into<String>) -> Self {
        ImageDataset {
            name: name.into(),
            images: Vec::new(),
            labels: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn push(&mut self, image: Tensor, label: u8, provenance: Provenance) -> Result<()> {
        match image.shape() {
            [1, _, _] => {}
            s => return Err(Error::Data(format!("image must be [1,H,W], got {s:?}"))),
        }
        if let Some(first) = self.images.first() {
            if first.shape() != image.shape() {
                return Err(Error::Data(format!(
                    "image shape {:?} differs from dataset shape {:?}",
                    image.shape(),
                    first.shape()
                )));
            }
        }
        if label > 1 {
            return Err(Error::Data(format!("label {label} is not binary")));
        }
        if let Some(v) = image.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel {v} outside [-1,1]")));
        }
        self.images.push(image);
        self.labels.push(label);
        self.provenance.push(provenance);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    /// `(height, width)` of the images, if any.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|t| (t.dim(1), t.dim(2)))
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn indices_of(&self, label: u8) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == label)
            .collect()
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> ImageDataset {
        ImageDataset {
            name: name.into(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
        }
    }

    pub fn with_label(&self, label: u8) -> ImageDataset {
        self.subset(&self.indices_of(label), format!("{}/{label}", self.name))
    }

    pub fn extend(&mut self, other: &ImageDataset) -> Result<()> {
        if let (Some(a), Some(b)) = (self.image_size(), other.image_size()) {
            if a != b {
                return Err(Error::Data(format!(
                    "cannot combine {}x{} images from {} with {}x{} images from {}",
                    a.0, a.1, self.name, b.0, b.1, other.name
                )));
            }
        }
        self.images.extend_from_slice(&other.images);
        self.labels.extend_from_slice(&other.labels);
        self.provenance.extend_from_slice(&other.provenance);
        Ok(())
    }

    pub fn take(&self, n: usize) -> ImageDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.name.clone())
    }

    /// Stacks the selected images into a `[B, 1, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = indices.iter().map(|&i| &self.images[i]).collect();
        Tensor::stack(&refs)
    }

    pub fn targets(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| f64::from(self.labels[i])).collect()
    }
}

/// Corner-aligned bilinear resize: destination pixel `i` samples source
/// coordinate `i * (S - 1) / (D - 1)` (0 when `D == 1`) on each axis.
pub fn resize_bilinear(img: &GrayImage, height: usize, width: usize) -> Result<Vec<f64>> {
    if height == 0 || width == 0 {
        return Err(Error::Data("zero-dimension resize target".into()));
    }
    let coord = |i: usize, src: usize, dst: usize| -> f64 {
        if dst <= 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        }
    };
    let px = |r: usize, c: usize| f64::from(img.get(r, c));
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = coord(y, img.height, height);
        let y0 = (sy.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = sy - y0 as f64;
        for x in 0..width {
            let sx = coord(x, img.width, width);
            let x0 = (sx.floor() as usize).min(img.width - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = sx - x0 as f64;
            let top = px(y0, x0) + tx * (px(y0, x1) - px(y0, x0));
            let bottom = px(y1, x0) + tx * (px(y1, x1) - px(y1, x0));
            out.push(top + ty * (bottom - top));
        }
    }
    Ok(out)
}

/// Maps an 8-bit value to `[-1, 1]` as `p / 127.5 - 1`.
pub fn normalize_pixel(p: f64) -> f64 {
    p / 127.5 - 1.0
}

/// Resizes to `size x size` and normalizes into a `[1, size, size]` tensor.
pub fn preprocess_image(img: &GrayImage, size: usize) -> Result<Tensor> {
    let data = if img.width == size && img.height == size {
        img.pixels.iter().map(|&p| f64::from(p)).collect()
    } else {
        resize_bilinear(img, size, size)?
    };
    Tensor::new(
        &[1, size, size],
        data.into_iter().map(normalize_pixel).collect(),
    )
}

/// Raw labelled rasters to a normalized dataset at `size x size`.
pub fn preprocess(
    raw: &[(GrayImage, u8)],
    size: usize,
    name: impl Into<String>,
) -> Result<ImageDataset> {
    if raw.is_empty() {
        return Err(Error::Data("preprocess: no images".into()));
    }
    let mut ds = ImageDataset::new(name);
    for (img, label) in raw {
        ds.push(preprocess_image(img, size)?, *label, Provenance::Real)?;
    }
    Ok(ds)
}

/// Inverse of the normalization, rounded to the nearest 8-bit level.
pub fn to_gray(image: &Tensor) -> Result<GrayImage> {
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        ref s => return Err(Error::Data(format!("cannot rasterize shape {s:?}"))),
    };
    let pixels = image
        .data()
        .iter()
        .map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::new(w, h, pixels)
}

/// Merges real images with synthetic positives and balances the classes by
/// augmenting the minority class, then shuffles.
///
/// With more positives than negatives (the usual case once synthetic tumors are
/// added) negatives are topped up with augmented copies of real negatives, and
/// vice versa.
pub fn merge_and_balance(
    real: &ImageDataset,
    synthetic_pos: &ImageDataset,
    rng: &mut Rng,
    policy: &AugmentPolicy,
) -> Result<ImageDataset> {
    if let (Some(a), Some(b)) = (real.image_size(), synthetic_pos.image_size()) {
        if a != b {
            return Err(Error::Data(format!(
                "real images are {}x{} but synthetic images are {}x{}",
                a.0, a.1, b.0, b.1
            )));
        }
    }
    if synthetic_pos.labels().iter().any(|&l| l != POSITIVE) {
        return Err(Error::Data(
            "synthetic set must contain positives only".into(),
        ));
    }
    let mut positives = real.with_label(POSITIVE);
    positives.extend(synthetic_pos)?;
    let mut negatives = real.with_label(NEGATIVE);
    let (p, n) = (positives.len(), negatives.len());
    if p > n {
        if negatives.is_empty() {
            return Err(Error::Data("no negatives to balance against".into()));
        }
        let extra = augment(&negatives, p - n, rng, policy)?;
        negatives.extend(&extra)?;
    } else if n > p {
        if positives.is_empty() {
            return Err(Error::Data("no positives to balance against".into()));
        }
        let extra = augment(&positives, n - p, rng, policy)?;
        positives.extend(&extra)?;
    }
    let mut merged = ImageDataset::new("merged");
    merged.extend(&positives)?;
    merged.extend(&negatives)?;
    let order = rng.permutation(merged.len());
    Ok(merged.subset(&order, "merged"))
}

/// Number of training items for a class of `n` items: `fraction * n`, with any
/// fractional part rounded up.
pub fn train_count(n: usize, fraction: f64) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).min(n)
}

/// Stratified split into `(train, test)`. Each class is shuffled and its first
/// [`train_count`] items go to training; both halves are then shuffled.
pub fn split(
    dataset: &ImageDataset,
    train_fraction: f64,
    rng: &mut Rng,
) -> Result<(ImageDataset, ImageDataset)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside [0,1]"
        )));
    }
    if dataset.count(POSITIVE) == 0 || dataset.count(NEGATIVE) == 0 {
        return Err(Error::Data(format!(
            "{}: both classes must be present to split",
            dataset.name
        )));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for label in [NEGATIVE, POSITIVE] {
        let mut idx = dataset.indices_of(label);
        rng.shuffle(&mut idx);
        let k = train_count(idx.len(), train_fraction);
        train_idx.extend_from_slice(&idx[..k]);
        test_idx.extend_from_slice(&idx[k..]);
    }
    rng.shuffle(&mut train_idx);
    rng.shuffle(&mut test_idx);
    Ok((
        dataset.subset(&train_idx, format!("{}/train", dataset.name)),
        dataset.subset(&test_idx, format!("{}/test", dataset.name)),
    ))
}
