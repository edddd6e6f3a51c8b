//! Procedural stand-in images: a dark field, a centred ellipse "brain" and,
//! for positives, one bright disc "tumor" inside the ellipse.

use serde::{Deserialize, Serialize};

use crate::data::dataset::{ImageDataset, Provenance, NEGATIVE, POSITIVE};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

/// Intensities are on a `[0, 1]` scale before mapping to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_size: usize,
    /// Ellipse intensity runs from `brain_intensity.1` at the centre down to
    /// `brain_intensity.0` at the rim.
    pub brain_intensity: (f64, f64),
    /// Disc radius range as fractions of the image size.
    pub tumor_radius: (f64, f64),
    pub tumor_intensity: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 32,
            brain_intensity: (0.2, 0.6),
            tumor_radius: (0.06, 0.15),
            tumor_intensity: (0.85, 1.0),
            noise_std: 0.02,
            seed: 0,
        }
    }
}

const SEMI_AXIS_X: f64 = 0.36;
const SEMI_AXIS_Y: f64 = 0.44;
const MAX_TILT_DEG: f64 = 15.0;
const CENTER_JITTER: f64 = 0.03;
/// Tumor centres are drawn within this normalized radius of the ellipse.
const TUMOR_REACH: f64 = 0.55;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(Error::Config(format!(
                "phantom image_size {} must be at least 4",
                self.image_size
            )));
        }
        let unit = |name: &str, (lo, hi): (f64, f64)| {
            if (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "phantom {name} range ({lo}, {hi}) invalid"
                )))
            }
        };
        unit("brain_intensity", self.brain_intensity)?;
        unit("tumor_radius", self.tumor_radius)?;
        unit("tumor_intensity", self.tumor_intensity)?;
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("phantom noise_std must be >= 0".into()));
        }
        Ok(())
    }

    fn render(&self, rng: &mut Rng, tumor: bool) -> Result<Tensor> {
        let s = self.image_size as f64;
        let c = (s - 1.0) / 2.0;
        let cx = c + rng.uniform_range(-CENTER_JITTER, CENTER_JITTER) * s;
        let cy = c + rng.uniform_range(-CENTER_JITTER, CENTER_JITTER) * s;
        let (sin, cos) = rng
            .uniform_range(-MAX_TILT_DEG, MAX_TILT_DEG)
            .to_radians()
            .sin_cos();
        let (rx, ry) = (SEMI_AXIS_X * s, SEMI_AXIS_Y * s);
        let (lo, hi) = self.brain_intensity;

        let disc = if tumor {
            // Uniform point in a disc of normalized radius TUMOR_REACH, mapped
            // through the ellipse frame.
            let rho = TUMOR_REACH * rng.uniform().sqrt();
            let phi = rng.uniform_range(0.0, std::f64::consts::TAU);
            let (u, v) = (rho * phi.cos() * rx, rho * phi.sin() * ry);
            let tx = cx + cos * u - sin * v;
            let ty = cy + sin * u + cos * v;
            let r = rng.uniform_range(self.tumor_radius.0, self.tumor_radius.1) * s;
            let level = rng.uniform_range(self.tumor_intensity.0, self.tumor_intensity.1);
            Some((tx, ty, r, level))
        } else {
            None
        };

        let n = self.image_size;
        let mut data = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let u = (cos * dx + sin * dy) / rx;
                let v = (-sin * dx + cos * dy) / ry;
                let rho2 = u * u + v * v;
                let mut p = if rho2 <= 1.0 {
                    hi - (hi - lo) * rho2
                } else {
                    0.0
                };
                if let Some((tx, ty, r, level)) = disc {
                    let (ex, ey) = (x as f64 - tx, y as f64 - ty);
                    if ex * ex + ey * ey <= r * r {
                        p = level;
                    }
                }
                p += self.noise_std * rng.normal();
                data.push(2.0 * p.clamp(0.0, 1.0) - 1.0);
            }
        }
        Tensor::new(&[1, n, n], data)
    }
}

/// `n_pos` tumor images followed by `n_neg` clean ones, all from the
/// spec's seed. Labels and provenance are set; order is deterministic.
pub fn make_phantom_dataset(
    spec: &PhantomSpec,
    n_pos: usize,
    n_neg: usize,
) -> Result<ImageDataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed, stream::PHANTOM);
    let mut ds = ImageDataset::new("phantom");
    for _ in 0..n_pos {
        ds.push(spec.render(&mut rng, true)?, POSITIVE, Provenance::Real)?;
    }
    for _ in 0..n_neg {
        ds.push(spec.render(&mut rng, false)?, NEGATIVE, Provenance::Real)?;
    }
    Ok(ds)
}
