use rand::Rng;

use super::langevin::{BATCH_STREAM, INIT_STREAM, MASK_STREAM, NOISE_STREAM};
use super::potential::{normal, Minibatches, Potential};
use super::schedule::ScheduleSpec;
use super::SamplerConfig;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// Initial posterior standard deviation before fitting.
pub const INIT_SIGMA: f64 = 1e-3;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `KL(N(mu, sigma^2) || N(m, v))` for one coordinate.
pub fn gaussian_kl(mu: f64, sigma: f64, m: f64, v: f64) -> f64 {
    0.5 * ((sigma * sigma + (mu - m).powi(2)) / v - 1.0 - (sigma * sigma / v).ln())
}

/// Diagonal Gaussian `q(theta)` with `sigma = softplus(rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl VariationalPosterior {
    pub fn new(mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if mu.len() != rho.len() {
            return Err(Error::Layout { expected: mu.len(), found: rho.len() });
        }
        Ok(Self { mu, rho })
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn kl_to_prior(&self, mean: f64, variance: f64) -> f64 {
        self.mu
            .iter()
            .zip(&self.rho)
            .map(|(&m, &r)| gaussian_kl(m, softplus(r), mean, variance))
            .sum()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.rho)
            .map(|(&m, &r)| m + softplus(r) * normal(rng))
            .collect()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Ascent step on `params` along `grad`.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            params[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Bayes by backprop: maximises the ELBO with one reparameterised draw per
/// step and the closed-form Gaussian KL, using Adam on the per-example ELBO.
pub fn run_vi<P: Potential + ?Sized>(
    pot: &P,
    config: &SamplerConfig,
    schedule: &ScheduleSpec,
) -> Result<(VariationalPosterior, f64)> {
    config.validate(pot.data_len())?;
    schedule.validate()?;
    let (pm, pv) = pot
        .gaussian_prior()
        .ok_or_else(|| Error::Config("variational fitting needs a Gaussian prior".into()))?;
    let mu = pot.init(&mut seeded(derive_seed(config.seed, INIT_STREAM)));
    let d = mu.len();
    let mut q = VariationalPosterior::new(mu, vec![softplus_inv(INIT_SIGMA); d])?;
    let mut batches = Minibatches::new(
        pot.data_len(),
        config.batch_size,
        seeded(derive_seed(config.seed, BATCH_STREAM)),
    );
    let mut noise = seeded(derive_seed(config.seed, NOISE_STREAM));
    let mut masks = seeded(derive_seed(config.seed, MASK_STREAM));
    let (mut opt_mu, mut opt_rho) = (Adam::new(d), Adam::new(d));
    let norm = pot.data_len().max(1) as f64;
    let mut theta = vec![0.0; d];
    let mut eps = vec![0.0; d];
    let mut g = vec![0.0; d];
    let (mut g_mu, mut g_rho) = (vec![0.0; d], vec![0.0; d]);
    let mut final_loss = 0.0;
    for t in 0..config.iterations {
        for i in 0..d {
            eps[i] = normal(&mut noise);
            theta[i] = q.mu[i] + softplus(q.rho[i]) * eps[i];
        }
        g.iter_mut().for_each(|v| *v = 0.0);
        let batch = batches.next_batch();
        let mut ll = 0.0;
        if !batch.is_empty() {
            ll = pot.add_likelihood_grad(&theta, batch, &mut masks, &mut g)?;
            let scale = pot.data_len() as f64 / batch.len() as f64;
            g.iter_mut().for_each(|v| *v *= scale);
            ll *= scale;
        }
        let elbo = ll - q.kl_to_prior(pm, pv);
        if !elbo.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: t });
        }
        final_loss = -ll / norm;
        for i in 0..d {
            let sigma = softplus(q.rho[i]);
            let dkl_dmu = (q.mu[i] - pm) / pv;
            let dkl_dsigma = sigma / pv - 1.0 / sigma;
            let ds = sigmoid(q.rho[i]);
            g_mu[i] = (g[i] - dkl_dmu) / norm;
            g_rho[i] = (g[i] * eps[i] - dkl_dsigma) * ds / norm;
        }
        let lr = config.step_scale * schedule.step_size(t);
        opt_mu.step(&mut q.mu, &g_mu, lr);
        opt_rho.step(&mut q.rho, &g_rho, lr);
    }
    Ok((q, final_loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_values() {
        assert_eq!(gaussian_kl(0.0, 1.0, 0.0, 1.0), 0.0);
        assert!((gaussian_kl(1.0, 1.0, 0.0, 1.0) - 0.5).abs() < 1e-15);
        let q = VariationalPosterior::new(vec![0.0; 3], vec![softplus_inv(2.0); 3]).unwrap();
        assert!(q.kl_to_prior(0.0, 4.0).abs() < 1e-12);
    }

    #[test]
    fn softplus_round_trip_and_positive() {
        for y in [1e-3, 0.5, 3.0, 50.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() / y < 1e-10);
        }
        assert!(softplus(-40.0) > 0.0);
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let (mu, rho, h) = (0.3, -0.7, 1e-6);
        let kl = |m: f64, r: f64| gaussian_kl(m, softplus(r), 0.1, 2.0);
        let fd_mu = (kl(mu + h, rho) - kl(mu - h, rho)) / (2.0 * h);
        let fd_rho = (kl(mu, rho + h) - kl(mu, rho - h)) / (2.0 * h);
        let s = softplus(rho);
        assert!((fd_mu - (mu - 0.1) / 2.0).abs() < 1e-8);
        assert!((fd_rho - (s / 2.0 - 1.0 / s) * sigmoid(rho)).abs() < 1e-8);
    }
}
