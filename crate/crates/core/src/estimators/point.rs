use rayon::prelude::*;

use super::langevin::{BATCH_STREAM, INIT_STREAM, MASK_STREAM};
use super::potential::{posterior_grad, Minibatches, Potential};
use super::schedule::ScheduleSpec;
use super::SamplerConfig;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// Stream under the run seed from which ensemble member seeds are derived.
const MEMBER_STREAM: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PointFit {
    pub theta: Vec<f64>,
    pub final_loss: f64,
}

/// Minibatch gradient ascent on the log posterior divided by the data size,
/// so the learning rate is on a per-example scale.
pub fn run_sgd<P: Potential + ?Sized>(
    pot: &P,
    config: &SamplerConfig,
    schedule: &ScheduleSpec,
) -> Result<PointFit> {
    config.validate(pot.data_len())?;
    schedule.validate()?;
    let mut theta = pot.init(&mut seeded(derive_seed(config.seed, INIT_STREAM)));
    let mut batches = Minibatches::new(
        pot.data_len(),
        config.batch_size,
        seeded(derive_seed(config.seed, BATCH_STREAM)),
    );
    let mut masks = seeded(derive_seed(config.seed, MASK_STREAM));
    let norm = pot.data_len().max(1) as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut final_loss = 0.0;
    for t in 0..config.iterations {
        let lr = config.step_scale * schedule.step_size(t) / norm;
        let ll = posterior_grad(pot, &theta, batches.next_batch(), &mut masks, &mut grad)?;
        final_loss = -ll / norm;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { iteration: t });
        }
        for (th, g) in theta.iter_mut().zip(&grad) {
            *th += lr * g;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { iteration: config.iterations });
    }
    Ok(PointFit { theta, final_loss })
}

/// Per-member run seeds derived from the base seed.
pub fn ensemble_seeds(seed: u64, members: usize) -> Vec<u64> {
    let base = derive_seed(seed, MEMBER_STREAM);
    (0..members as u64).map(|m| derive_seed(base, m)).collect()
}

/// Independently initialised SGD members trained in parallel, one per seed.
pub fn run_ensemble_with_seeds<P: Potential + ?Sized>(
    pot: &P,
    config: &SamplerConfig,
    schedule: &ScheduleSpec,
    seeds: &[u64],
) -> Result<Vec<PointFit>> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("an ensemble needs at least 2 members, got {}", seeds.len())));
    }
    seeds
        .par_iter()
        .enumerate()
        .map(|(member, &seed)| {
            let cfg = SamplerConfig { seed, ..config.clone() };
            run_sgd(pot, &cfg, schedule).map_err(|e| Error::MemberDiverged {
                member,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn run_ensemble<P: Potential + ?Sized>(
    pot: &P,
    config: &SamplerConfig,
    schedule: &ScheduleSpec,
    members: usize,
) -> Result<Vec<PointFit>> {
    run_ensemble_with_seeds(pot, config, schedule, &ensemble_seeds(config.seed, members))
}
