//! Adversarial and classification losses.
//!
//! Probabilities enter every logarithm through `ln(max(p, PROB_FLOOR))`, so raw
//! outputs of exactly 0 or 1 keep the losses finite while a perfect prediction
//! still scores exactly zero. Gradients are taken at the floored argument.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var, PROB_FLOOR};

fn safe_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Mean binary cross-entropy; the shared core of every loss below.
pub(crate) fn bce_value(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let mut l = 0.0;
            if y != 0.0 {
                l -= y * safe_ln(p);
            }
            if y != 1.0 {
                l -= (1.0 - y) * safe_ln(1.0 - p);
            }
            l
        })
        .sum();
    total / n
}

pub(crate) fn bce_grad(pred: &[f64], target: &[f64], upstream: f64) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &y)| {
            let mut g = 0.0;
            if y != 0.0 {
                g -= y / p.max(PROB_FLOOR);
            }
            if y != 1.0 {
                g += (1.0 - y) / (1.0 - p).max(PROB_FLOOR);
            }
            upstream * g / n
        })
        .collect()
}

fn non_empty(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(format!("{name}: empty batch")));
    }
    Ok(())
}

/// The adversarial value `mean[ln D(x)] + mean[ln(1 - D(G(z)))]` that the
/// discriminator maximizes and the generator minimizes.
pub fn gan_value(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    non_empty("gan_value", d_real)?;
    non_empty("gan_value", d_fake)?;
    let real = d_real.iter().map(|&p| safe_ln(p)).sum::<f64>() / d_real.len() as f64;
    let fake = d_fake.iter().map(|&p| safe_ln(1.0 - p)).sum::<f64>() / d_fake.len() as f64;
    Ok(real + fake)
}

/// `L_D = -mean[ln D(x)] - mean[ln(1 - D(G(z)))]`, recorded on the tape.
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let ones = vec![1.0; tape.value(d_real).len()];
    let zeros = vec![0.0; tape.value(d_fake).len()];
    let real = tape.binary_cross_entropy(d_real, &ones)?;
    let fake = tape.binary_cross_entropy(d_fake, &zeros)?;
    tape.add(real, fake)
}

/// Non-saturating generator loss `L_G = -mean[ln D(G(z))]`.
pub fn generator_loss(tape: &mut Tape, d_fake: Var) -> Result<Var> {
    let ones = vec![1.0; tape.value(d_fake).len()];
    tape.binary_cross_entropy(d_fake, &ones)
}

/// `-mean[y ln p + (1-y) ln(1-p)]` for binary labels.
pub fn binary_cross_entropy(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    non_empty("binary_cross_entropy", target)?;
    tape.binary_cross_entropy(pred, target)
}

/// `lambda * sum(theta^2)` over all given parameters.
pub fn l2_penalty(tape: &mut Tape, params: &[Var], lambda: f64) -> Result<Var> {
    tape.sum_of_squares(params, lambda)
}

/// Plain-value versions for evaluation code that does not need a tape.
pub mod value {
    use super::*;

    pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
        non_empty("discriminator_loss", d_real)?;
        non_empty("discriminator_loss", d_fake)?;
        Ok(bce_value(d_real, &vec![1.0; d_real.len()])
            + bce_value(d_fake, &vec![0.0; d_fake.len()]))
    }

    pub fn generator_loss(d_fake: &[f64]) -> Result<f64> {
        non_empty("generator_loss", d_fake)?;
        Ok(bce_value(d_fake, &vec![1.0; d_fake.len()]))
    }

    pub fn binary_cross_entropy(pred: &[f64], target: &[f64]) -> Result<f64> {
        non_empty("binary_cross_entropy", target)?;
        if pred.len() != target.len() {
            return Err(Error::Shape(format!(
                "binary_cross_entropy: {} predictions vs {} targets",
                pred.len(),
                target.len()
            )));
        }
        Ok(bce_value(pred, target))
    }
}
