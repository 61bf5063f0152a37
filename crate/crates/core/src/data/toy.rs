//! One-dimensional posteriors with known moments, used to validate samplers.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::seeded;

const GRID_INTERVALS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToyPosteriorSpec {
    /// Unknown mean of a Gaussian with known observation variance.
    ConjugateGaussian {
        prior_mean: f64,
        prior_var: f64,
        obs_var: f64,
        data: Vec<f64>,
    },
    /// The target density itself is a Gaussian mixture; there is no data.
    /// Moments are integrated numerically over `interval`.
    BimodalMixture {
        means: Vec<f64>,
        weights: Vec<f64>,
        variances: Vec<f64>,
        interval: (f64, f64),
    },
}

impl ToyPosteriorSpec {
    /// `n` observations drawn from `N(true_mean, obs_var)` under a `N(0, 1)` prior.
    pub fn conjugate(n: usize, true_mean: f64, obs_var: f64, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let noise = Normal::new(true_mean, obs_var.sqrt()).expect("observation variance");
        Self::ConjugateGaussian {
            prior_mean: 0.0,
            prior_var: 1.0,
            obs_var,
            data: (0..n).map(|_| noise.sample(&mut rng)).collect(),
        }
    }

    /// Equal-weight two-component mixture at `+-offset` with common variance.
    pub fn bimodal(offset: f64, variance: f64) -> Self {
        let reach = offset.abs() + 12.0 * variance.sqrt();
        Self::BimodalMixture {
            means: vec![-offset, offset],
            weights: vec![0.5, 0.5],
            variances: vec![variance, variance],
            interval: (-reach, reach),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::ConjugateGaussian { prior_var, obs_var, .. } => {
                if !(*prior_var > 0.0 && *obs_var > 0.0) {
                    return Err(Error::Config("toy variances must be positive".into()));
                }
            }
            Self::BimodalMixture { means, weights, variances, interval } => {
                if means.is_empty() || means.len() != weights.len() || means.len() != variances.len() {
                    return Err(Error::Config("mixture component lists differ in length".into()));
                }
                if variances.iter().any(|&v| v <= 0.0) || weights.iter().any(|&w| w < 0.0) {
                    return Err(Error::Config("mixture variances must be positive".into()));
                }
                if weights.iter().sum::<f64>() <= 0.0 || interval.0 >= interval.1 {
                    return Err(Error::Config("degenerate mixture weights or interval".into()));
                }
            }
        }
        Ok(())
    }

    /// Exact moments of the target: closed form for the conjugate model,
    /// composite Simpson quadrature for the mixture.
    pub fn moments(&self) -> Result<Moments> {
        self.validate()?;
        match self {
            Self::ConjugateGaussian { prior_mean, prior_var, obs_var, data } => {
                let variance = 1.0 / (1.0 / prior_var + data.len() as f64 / obs_var);
                let sum: f64 = data.iter().sum();
                Ok(Moments {
                    mean: variance * (prior_mean / prior_var + sum / obs_var),
                    variance,
                })
            }
            Self::BimodalMixture { interval, .. } => {
                let (lo, hi) = *interval;
                let n = GRID_INTERVALS;
                let h = (hi - lo) / n as f64;
                let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
                for i in 0..=n {
                    let x = lo + i as f64 * h;
                    let w = if i == 0 || i == n {
                        1.0
                    } else if i % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    let p = w * self.density(x);
                    m0 += p;
                    m1 += p * x;
                    m2 += p * x * x;
                }
                let (m0, m1, m2) = (m0 * h / 3.0, m1 * h / 3.0, m2 * h / 3.0);
                if m0 < 0.9999 {
                    return Err(Error::Oracle(format!(
                        "interval [{lo}, {hi}] holds only {m0:.6} of the mixture mass"
                    )));
                }
                let mean = m1 / m0;
                Ok(Moments {
                    mean,
                    variance: m2 / m0 - mean * mean,
                })
            }
        }
    }

    /// Normalised target density. For the conjugate model this is the exact
    /// Gaussian posterior.
    pub fn density(&self, x: f64) -> f64 {
        match self {
            Self::ConjugateGaussian { .. } => {
                let m = self.moments().expect("valid conjugate spec");
                gaussian(x, m.mean, m.variance)
            }
            Self::BimodalMixture { means, weights, variances, .. } => {
                let total: f64 = weights.iter().sum();
                means
                    .iter()
                    .zip(weights)
                    .zip(variances)
                    .map(|((&m, &w), &v)| w / total * gaussian(x, m, v))
                    .sum()
            }
        }
    }

    /// d/dx log of the mixture density. Not used for the conjugate model,
    /// whose gradient splits into prior and likelihood terms.
    pub fn mixture_score(&self, x: f64) -> f64 {
        let Self::BimodalMixture { means, weights, variances, .. } = self else {
            return 0.0;
        };
        // responsibilities in log space so far-out points stay finite
        let logs: Vec<f64> = means
            .iter()
            .zip(weights)
            .zip(variances)
            .map(|((&m, &w), &v)| w.ln() - 0.5 * v.ln() - (x - m).powi(2) / (2.0 * v))
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        let mut acc = 0.0;
        for ((&l, &m), &v) in logs.iter().zip(means).zip(variances) {
            let r = (l - top).exp();
            norm += r;
            acc += r * (m - x) / v;
        }
        acc / norm
    }
}

fn gaussian(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (std::f64::consts::TAU * var).sqrt()
}

/// Fraction of `samples` lying within three standard deviations of each mode.
pub fn mode_coverage(samples: &[f64], means: &[f64], sigmas: &[f64]) -> Vec<f64> {
    let n = samples.len().max(1) as f64;
    means
        .iter()
        .zip(sigmas)
        .map(|(&m, &s)| samples.iter().filter(|&&x| (x - m).abs() <= 3.0 * s).count() as f64 / n)
        .collect()
}
