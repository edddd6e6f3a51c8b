//! Classical augmentation: horizontal flip, small rotation, brightness shift.

use serde::{Deserialize, Serialize};

use crate::data::dataset::{ImageDataset, Provenance};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Pixel value used for samples that fall outside the source image.
pub const BORDER_FILL: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub flip_probability: f64,
    pub max_rotation_deg: f64,
    pub max_brightness_shift: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_probability: 0.5,
            max_rotation_deg: 15.0,
            max_brightness_shift: 0.1,
        }
    }
}

/// One concrete draw from an [`AugmentPolicy`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip: bool,
    pub rotation_deg: f64,
    pub brightness: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip: false,
        rotation_deg: 0.0,
        brightness: 0.0,
    };
}

impl AugmentPolicy {
    pub fn sample(&self, rng: &mut Rng) -> Transform {
        let flip = rng.bernoulli(self.flip_probability);
        let rotation_deg = rng.uniform_range(-self.max_rotation_deg, self.max_rotation_deg);
        let brightness = rng.uniform_range(-self.max_brightness_shift, self.max_brightness_shift);
        Transform {
            flip,
            rotation_deg,
            brightness,
        }
    }
}

fn sample_bilinear(plane: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let ty = sy - y0;
    let tx = sx - x0;
    let at = |y: f64, x: f64| -> f64 {
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            BORDER_FILL
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let top = at(y0, x0) + tx * (at(y0, x0 + 1.0) - at(y0, x0));
    let bottom = at(y0 + 1.0, x0) + tx * (at(y0 + 1.0, x0 + 1.0) - at(y0 + 1.0, x0));
    top + ty * (bottom - top)
}

/// Applies flip, then rotation about the image centre (bilinear, border filled
/// with -1), then the brightness shift, and clamps to `[-1, 1]`.
pub fn apply(image: &Tensor, t: &Transform) -> Result<Tensor> {
    let (h, w) = match *image.shape() {
        [1, h, w] => (h, w),
        ref s => return Err(Error::Data(format!("augment expects [1,H,W], got {s:?}"))),
    };
    let src = image.data();
    let mut plane: Vec<f64> = if t.flip {
        (0..h * w)
            .map(|i| src[(i / w) * w + (w - 1 - i % w)])
            .collect()
    } else {
        src.to_vec()
    };
    if t.rotation_deg != 0.0 {
        let (sin, cos) = t.rotation_deg.to_radians().sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sx = cx + cos * dx + sin * dy;
                let sy = cy - sin * dx + cos * dy;
                out[y * w + x] = sample_bilinear(&plane, h, w, sy, sx);
            }
        }
        plane = out;
    }
    for v in &mut plane {
        *v = (*v + t.brightness).clamp(-1.0, 1.0);
    }
    Tensor::new(&[1, h, w], plane)
}

/// `n_new` augmented copies of uniformly chosen source images; labels are
/// inherited and provenance is [`Provenance::Augmented`].
pub fn augment(
    source: &ImageDataset,
    n_new: usize,
    rng: &mut Rng,
    policy: &AugmentPolicy,
) -> Result<ImageDataset> {
    let mut out = ImageDataset::new(format!("{}/augmented", source.name));
    if n_new == 0 {
        return Ok(out);
    }
    if source.is_empty() {
        return Err(Error::Data("augment: source dataset is empty".into()));
    }
    for _ in 0..n_new {
        let i = rng.below(source.len());
        let t = policy.sample(rng);
        out.push(
            apply(source.image(i), &t)?,
            source.labels()[i],
            Provenance::Augmented,
        )?;
    }
    Ok(out)
}
