//! Diagonal Gaussian algebra: entropies, KL to the prior, sums of independent
//! Gaussians (the variable `V = z_1 + … + z_M`), and sampling-based oracles.
//!
//! All quantities are in nats.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseSource;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A Gaussian with diagonal covariance, parameterized by its standard
/// deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::InvalidInput(format!(
                "mean has {} entries but std has {}",
                mean.len(),
                std.len()
            )));
        }
        if mean.is_empty() {
            return Err(Error::InvalidInput("empty Gaussian".into()));
        }
        if let Some(m) = mean.iter().find(|m| !m.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite mean {m}")));
        }
        if let Some(s) = std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "std must be finite and positive, got {s}"
            )));
        }
        Ok(DiagGaussian { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn variance(&self) -> Vec<f64> {
        self.std.iter().map(|s| s * s).collect()
    }

    /// `mean + std ⊙ noise`.
    pub fn sample_with(&self, noise: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), noise.len(), "noise")?;
        Ok(self
            .mean
            .iter()
            .zip(&self.std)
            .zip(noise)
            .map(|((m, s), e)| m + s * e)
            .collect())
    }

    pub fn sample(&self, noise: &mut NoiseSource) -> Vec<f64> {
        let eps = noise.normal_vec(self.dim());
        self.sample_with(&eps).expect("noise has matching length")
    }
}

fn check_dim(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::InvalidInput(format!(
            "{what} has length {got}, expected {expected}"
        )));
    }
    Ok(())
}

/// Per-dimension `½(1 + ln(2π σ²))`, summed over dimensions.
pub fn gaussian_entropy(g: &DiagGaussian) -> f64 {
    g.std
        .iter()
        .map(|s| 0.5 * (1.0 + LN_2PI + 2.0 * s.ln()))
        .sum()
}

/// Distribution of the sum of independent Gaussians: means add, variances add.
pub fn sum_gaussians(parts: &[DiagGaussian]) -> Result<DiagGaussian> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot sum an empty list of Gaussians".into()))?;
    let d = first.dim();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for p in parts {
        check_dim(d, p.dim(), "Gaussian")?;
        for j in 0..d {
            mean[j] += p.mean[j];
            var[j] += p.std[j] * p.std[j];
        }
    }
    DiagGaussian::new(mean, var.into_iter().map(f64::sqrt).collect())
}

pub fn log_density(g: &DiagGaussian, x: &[f64]) -> Result<f64> {
    check_dim(g.dim(), x.len(), "point")?;
    Ok(g.mean
        .iter()
        .zip(&g.std)
        .zip(x)
        .map(|((m, s), x)| {
            let u = (x - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * u * u
        })
        .sum())
}

/// `KL(g ‖ N(0, I))`.
pub fn kl_to_standard_normal(g: &DiagGaussian) -> f64 {
    g.mean
        .iter()
        .zip(&g.std)
        .map(|(m, s)| 0.5 * (s * s + m * m - 1.0 - 2.0 * s.ln()))
        .sum()
}

/// `−(1/n) Σ log g(x_k)` over `n_samples` draws from `g`.
pub fn mc_entropy_estimate(g: &DiagGaussian, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be at least 1".into()));
    }
    let mut rng = NoiseSource::new(seed);
    let mut x = vec![0.0; g.dim()];
    let mut total = 0.0;
    for _ in 0..n_samples {
        for (j, xj) in x.iter_mut().enumerate() {
            let e: f64 = rng.rng().sample(StandardNormal);
            *xj = g.mean[j] + g.std[j] * e;
        }
        total += log_density(g, &x)?;
    }
    Ok(-total / n_samples as f64)
}
