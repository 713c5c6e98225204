//! Class-conditional label-noise model and the unbiased corrected square loss.
//!
//! A binary label q in {+1,-1} is observed as a noisy q~ that flips
//! +1 -> -1 with probability `rho_pos` and -1 -> +1 with probability
//! `rho_neg`. The corrected loss is the linear combination of the plain
//! square loss at both label values whose expectation over the flip
//! distribution equals the clean loss. It can be negative pointwise; that is
//! what makes it unbiased, and it must not be clamped.

use crate::error::{LnsError, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Flip probabilities (rho_pos: P[+1 observed as -1], rho_neg: P[-1 observed as +1]).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseRates {
    pub rho_pos: f64,
    pub rho_neg: f64,
}

impl NoiseRates {
    pub fn new(rho_pos: f64, rho_neg: f64) -> Result<Self> {
        if !(rho_pos >= 0.0 && rho_neg >= 0.0 && rho_pos + rho_neg < 1.0) {
            return Err(LnsError::InvalidRates { rho_pos, rho_neg });
        }
        Ok(NoiseRates { rho_pos, rho_neg })
    }

    pub fn symmetric(rho: f64) -> Result<Self> {
        NoiseRates::new(rho, rho)
    }

    pub fn zero() -> Self {
        NoiseRates { rho_pos: 0.0, rho_neg: 0.0 }
    }

    fn denom(&self) -> f64 {
        1.0 - self.rho_pos - self.rho_neg
    }

    /// rho indexed by label sign: rho_{+1} or rho_{-1}.
    fn rho_at(&self, label: f64) -> f64 {
        if label > 0.0 {
            self.rho_pos
        } else {
            self.rho_neg
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Reduction {
    Sum,
    Mean,
}

fn check_label(label: f64) -> Result<()> {
    if label != 1.0 && label != -1.0 {
        return Err(LnsError::InvalidArgument {
            op: "noisy_loss",
            msg: format!("label must be +1 or -1, got {label}"),
        });
    }
    Ok(())
}

/// Plain square loss (q_hat - q)^2 against a clean binary label.
pub fn mse_label_loss(prediction: f64, label: f64) -> Result<f64> {
    check_label(label)?;
    Ok((prediction - label) * (prediction - label))
}

/// Noise-corrected square loss against a noisy binary label.
///
/// `[(1 - rho_{-q~}) * l(q^, q~) - rho_{q~} * l(q^, -q~)] / (1 - rho_pos - rho_neg)`
pub fn corrected_loss(prediction: f64, noisy_label: f64, rates: NoiseRates) -> Result<f64> {
    check_label(noisy_label)?;
    let l_same = (prediction - noisy_label) * (prediction - noisy_label);
    let l_opp = (prediction + noisy_label) * (prediction + noisy_label);
    Ok(((1.0 - rates.rho_at(-noisy_label)) * l_same - rates.rho_at(noisy_label) * l_opp)
        / rates.denom())
}

/// Analytic d(corrected_loss)/d(prediction):
/// `2 (q^ - q~) - 4 rho_{q~} q~ / (1 - rho_pos - rho_neg)`.
pub fn corrected_loss_grad(prediction: f64, noisy_label: f64, rates: NoiseRates) -> Result<f64> {
    check_label(noisy_label)?;
    Ok(2.0 * (prediction - noisy_label)
        - 4.0 * rates.rho_at(noisy_label) * noisy_label / rates.denom())
}

/// Corrected loss reduced over a whole prediction tensor.
pub fn layer_loss(
    predictions: &Tensor,
    noisy_labels: &Tensor,
    rates: NoiseRates,
    reduction: Reduction,
) -> Result<f64> {
    if predictions.dims() != noisy_labels.dims() {
        return Err(LnsError::ShapeMismatch {
            op: "layer_loss",
            lhs: predictions.dims().to_vec(),
            rhs: noisy_labels.dims().to_vec(),
        });
    }
    let mut acc = 0f64;
    for (&p, &l) in predictions.data.iter().zip(&noisy_labels.data) {
        acc += corrected_loss(p as f64, l as f64, rates)?;
    }
    Ok(match reduction {
        Reduction::Sum => acc,
        Reduction::Mean => acc / predictions.numel() as f64,
    })
}

/// Gradient of `layer_loss` w.r.t. each prediction element, as f32.
pub fn layer_loss_grad(
    predictions: &Tensor,
    noisy_labels: &Tensor,
    rates: NoiseRates,
    reduction: Reduction,
) -> Result<Tensor> {
    if predictions.dims() != noisy_labels.dims() {
        return Err(LnsError::ShapeMismatch {
            op: "layer_loss",
            lhs: predictions.dims().to_vec(),
            rhs: noisy_labels.dims().to_vec(),
        });
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / predictions.numel() as f64,
    };
    let mut out = Tensor::zeros(predictions.dims());
    for (i, (&p, &l)) in predictions.data.iter().zip(&noisy_labels.data).enumerate() {
        out.data[i] = (corrected_loss_grad(p as f64, l as f64, rates)? * scale) as f32;
    }
    Ok(out)
}

/// Test utility: independently flip each clean +-1 element per the noise model.
pub fn flip_noise_simulate(clean: &Tensor, rates: NoiseRates, seed: u64) -> Result<Tensor> {
    NoiseRates::new(rates.rho_pos, rates.rho_neg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = clean.clone();
    for v in out.data.iter_mut() {
        check_label(*v as f64)?;
        let rho = if *v > 0.0 { rates.rho_pos } else { rates.rho_neg };
        if rng.gen::<f64>() < rho {
            *v = -*v;
        }
    }
    Ok(out)
}
