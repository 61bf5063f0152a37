use rand::Rng;

use super::potential::{normal, posterior_grad, Minibatches, Potential};
use super::schedule::ScheduleSpec;
use super::{SampleMeta, SamplerConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// Stream offsets under the run seed.
pub(crate) const INIT_STREAM: u64 = 0;
pub(crate) const BATCH_STREAM: u64 = 1;
pub(crate) const NOISE_STREAM: u64 = 2;
pub(crate) const MASK_STREAM: u64 = 3;

/// The output of one Langevin run over a generic potential.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub samples: Vec<Vec<f64>>,
    pub meta: Vec<SampleMeta>,
    pub last: Vec<f64>,
    /// Mean negative log-likelihood per example on the final minibatch.
    pub final_loss: f64,
    pub iterations: usize,
}

impl Chain {
    /// The first coordinate of every collected sample.
    pub fn scalar_samples(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s[0]).collect()
    }
}

/// One Langevin update `theta += eps / 2 * grad + N(0, eps)`.
pub fn sgld_step<R: Rng + ?Sized>(
    theta: &mut [f64],
    grad: &[f64],
    eps: f64,
    rng: &mut R,
    iteration: usize,
) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { iteration });
    }
    if eps == 0.0 {
        return Ok(());
    }
    let sd = eps.sqrt();
    for (t, g) in theta.iter_mut().zip(grad) {
        *t += 0.5 * eps * g + sd * normal(rng);
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Divergence { iteration });
    }
    Ok(())
}

enum Collect {
    /// Every `thinning`-th iterate from `from` on.
    Thinned { from: usize },
    /// Iterates past `from` whose schedule value is at most `tau`, on the
    /// thinning grid.
    LowStep { from: usize, tau: f64 },
}

fn run<P: Potential + ?Sized>(
    pot: &P,
    config: &SamplerConfig,
    schedule: &ScheduleSpec,
    collect: Collect,
    start: Option<Vec<f64>>,
) -> Result<Chain> {
    config.validate(pot.data_len())?;
    schedule.validate()?;
    let mut init_rng = seeded(derive_seed(config.seed, INIT_STREAM));
    let mut theta = start.unwrap_or_else(|| pot.init(&mut init_rng));
    let mut batches = Minibatches::new(
        pot.data_len(),
        config.batch_size,
        seeded(derive_seed(config.seed, BATCH_STREAM)),
    );
    let mut noise = seeded(derive_seed(config.seed, NOISE_STREAM));
    let mut masks = seeded(derive_seed(config.seed, MASK_STREAM));
    let mut grad = vec![0.0; theta.len()];
    let mut chain = Chain {
        samples: Vec::new(),
        meta: Vec::new(),
        last: Vec::new(),
        final_loss: 0.0,
        iterations: config.iterations,
    };
    for t in 0..config.iterations {
        let raw = schedule.step_size(t);
        let eps = config.step_scale * raw;
        let batch = batches.next_batch();
        let ll = posterior_grad(pot, &theta, batch, &mut masks, &mut grad)?;
        if !batch.is_empty() {
            chain.final_loss = -ll / pot.data_len() as f64;
        }
        sgld_step(&mut theta, &grad, eps, &mut noise, t)?;
        let keep = match collect {
            Collect::Thinned { from } => t >= from && (t - from) % config.thinning == 0,
            Collect::LowStep { from, tau } => t >= from && raw <= tau && t % config.thinning == 0,
        };
        if keep {
            chain.samples.push(theta.clone());
            chain.meta.push(SampleMeta { iteration: t, step_size: eps });
        }
    }
    chain.last = theta;
    Ok(chain)
}

/// SGLD with samples kept after the burn-in fraction at the thinning interval.
pub fn run_sgld<P: Potential + ?Sized>(
    pot: &P,
    config: &SamplerConfig,
    schedule: &ScheduleSpec,
) -> Result<Chain> {
    run_sgld_from(pot, config, schedule, None)
}

/// As [`run_sgld`], optionally from an explicit starting point.
pub fn run_sgld_from<P: Potential + ?Sized>(
    pot: &P,
    config: &SamplerConfig,
    schedule: &ScheduleSpec,
    start: Option<Vec<f64>>,
) -> Result<Chain> {
    let from = config.burn_in_iterations();
    run(pot, config, schedule, Collect::Thinned { from }, start)
}

/// Langevin dynamics under a restarting schedule. The first cycle (or the
/// burn-in fraction, if longer) is discarded, and afterwards only iterates
/// whose schedule value is at most the collection threshold are kept.
pub fn run_recast<P: Potential + ?Sized>(
    pot: &P,
    config: &SamplerConfig,
    schedule: &ScheduleSpec,
) -> Result<Chain> {
    let period = schedule
        .period()
        .ok_or_else(|| Error::Config("the restart sampler needs a cosine-restart schedule".into()))?;
    let tau = config
        .collect_threshold
        .or_else(|| schedule.default_collect_threshold())
        .expect("cosine schedule has a default threshold");
    let from = period.max(config.burn_in_iterations());
    run(pot, config, schedule, Collect::LowStep { from, tau }, None)
}
