//! Parameter estimation back-ends. Every back-end ends in a [`Posterior`]
//! from which predictive samples are drawn the same way.

mod langevin;
mod point;
mod potential;
mod schedule;
mod vi;

pub use langevin::{run_recast, run_sgld, run_sgld_from, sgld_step, Chain};
pub use point::{ensemble_seeds, run_ensemble, run_ensemble_with_seeds, run_sgd, PointFit};
pub use potential::{posterior_grad, Minibatches, NetPotential, Potential, ToyPotential};
pub use schedule::ScheduleSpec;
pub use vi::{gaussian_kl, run_vi, softplus, softplus_inv, VariationalPosterior, INIT_SIGMA};

use std::fmt;
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{predict, DropoutMasks, ModelSpec, ParameterVector, PriorSpec};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;
use crate::uncertainty::PredictiveSample;

pub const DEFAULT_MEMBERS: usize = 12;

/// Inputs per forward pass when drawing predictive samples.
const PREDICT_CHUNK: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorKind {
    Sgd,
    Sgld,
    Recast,
    Mcd,
    Vi,
    Ensemble,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Sgd,
        EstimatorKind::Sgld,
        EstimatorKind::Recast,
        EstimatorKind::Mcd,
        EstimatorKind::Vi,
        EstimatorKind::Ensemble,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            EstimatorKind::Sgd => "sgd",
            EstimatorKind::Sgld => "sgld",
            EstimatorKind::Recast => "recast",
            EstimatorKind::Mcd => "mcd",
            EstimatorKind::Vi => "vi",
            EstimatorKind::Ensemble => "ensemble",
        }
    }

    /// Stable numeric code used in checkpoints.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }

    /// The schedule each back-end uses unless configured otherwise.
    pub fn default_schedule(self) -> ScheduleSpec {
        match self {
            EstimatorKind::Sgld => ScheduleSpec::polynomial_default(),
            EstimatorKind::Recast => ScheduleSpec::cosine_default(),
            _ => ScheduleSpec::Constant(1.0),
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

/// Loop settings shared by all back-ends. For the optimisers `step_scale`
/// is the learning rate; for the samplers it multiplies the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Fraction of iterations discarded before collection starts.
    pub burn_in: f64,
    pub thinning: usize,
    /// Collection threshold on the raw schedule value for the restart sampler.
    pub collect_threshold: Option<f64>,
    pub step_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 100,
            burn_in: 0.5,
            thinning: 10,
            collect_threshold: None,
            step_scale: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, data_len: usize) -> Result<()> {
        let problem = if self.iterations == 0 {
            Some("iterations must be positive".to_string())
        } else if self.batch_size == 0 || (data_len > 0 && self.batch_size > data_len) {
            Some(format!("batch size {} does not fit {data_len} examples", self.batch_size))
        } else if !(0.0..1.0).contains(&self.burn_in) {
            Some(format!("burn-in fraction {} outside [0, 1)", self.burn_in))
        } else if self.thinning == 0 {
            Some("thinning must be at least 1".to_string())
        } else if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            Some(format!("step scale {} must be positive", self.step_scale))
        } else {
            None
        };
        problem.map_or(Ok(()), |p| Err(Error::Config(p)))
    }

    pub fn burn_in_iterations(&self) -> usize {
        (self.burn_in * self.iterations as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub iteration: usize,
    /// Scaled step size in force when the sample was taken.
    pub step_size: f64,
}

/// Weight vectors drawn by an estimator, ordered by collection time.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSampleSet {
    pub spec: ModelSpec,
    pub estimator: EstimatorKind,
    pub samples: Vec<ParameterVector>,
    pub meta: Vec<SampleMeta>,
}

impl PosteriorSampleSet {
    pub fn new(
        spec: ModelSpec,
        estimator: EstimatorKind,
        samples: Vec<ParameterVector>,
        meta: Vec<SampleMeta>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config(format!("{estimator} collected no samples")));
        }
        let len = spec.layout().len;
        if let Some(bad) = samples.iter().find(|s| s.len() != len) {
            return Err(Error::Layout { expected: len, found: bad.len() });
        }
        Ok(Self { spec, estimator, samples, meta })
    }
}

/// What a trained estimator hands to inference.
#[derive(Debug, Clone, PartialEq)]
pub enum Posterior {
    /// A finite set of weight vectors (SGD, SGLD, the restart sampler, ensembles).
    Samples(PosteriorSampleSet),
    /// Dropout-trained weights; predictive samples come from fresh masks.
    Dropout { spec: ModelSpec, weights: ParameterVector },
    /// A fitted diagonal Gaussian; predictive samples are fresh draws.
    Variational { spec: ModelSpec, q: VariationalPosterior },
}

impl Posterior {
    pub fn spec(&self) -> &ModelSpec {
        match self {
            Posterior::Samples(s) => &s.spec,
            Posterior::Dropout { spec, .. } | Posterior::Variational { spec, .. } => spec,
        }
    }

    pub fn estimator(&self) -> EstimatorKind {
        match self {
            Posterior::Samples(s) => s.estimator,
            Posterior::Dropout { .. } => EstimatorKind::Mcd,
            Posterior::Variational { .. } => EstimatorKind::Vi,
        }
    }

    /// Number of distinct weight vectors, or `None` when draws are unlimited.
    pub fn available(&self) -> Option<usize> {
        match self {
            Posterior::Samples(s) => Some(s.samples.len()),
            _ => None,
        }
    }

    /// The stored vectors: the samples, the dropout weights, or `[mu, rho]`.
    pub fn vectors(&self) -> Vec<&[f64]> {
        match self {
            Posterior::Samples(s) => s.samples.iter().map(|p| p.as_slice()).collect(),
            Posterior::Dropout { weights, .. } => vec![weights.as_slice()],
            Posterior::Variational { q, .. } => vec![&q.mu, &q.rho],
        }
    }

    /// Weight vectors that represent the posterior for histograms: the
    /// samples, the dropout weights, or the variational means.
    pub fn weight_vectors(&self) -> Vec<&[f64]> {
        match self {
            Posterior::Variational { q, .. } => vec![&q.mu],
            _ => self.vectors(),
        }
    }
}

/// A trained posterior with the last training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub posterior: Posterior,
    pub final_loss: f64,
}

/// Trains `kind` on `data`. `members` applies to ensembles only.
pub fn train(
    kind: EstimatorKind,
    spec: &ModelSpec,
    data: &Dataset,
    prior: PriorSpec,
    config: &SamplerConfig,
    schedule: &ScheduleSpec,
    members: usize,
) -> Result<Fit> {
    let pot = NetPotential::new(spec, data, prior)?;
    let set = |samples: Vec<ParameterVector>, meta: Vec<SampleMeta>| {
        PosteriorSampleSet::new(spec.clone(), kind, samples, meta).map(Posterior::Samples)
    };
    let chain_fit = |chain: Chain| -> Result<Fit> {
        let samples = chain.samples.into_iter().map(ParameterVector).collect();
        Ok(Fit { posterior: set(samples, chain.meta)?, final_loss: chain.final_loss })
    };
    match kind {
        EstimatorKind::Sgd => {
            let fit = run_sgd(&pot, config, schedule)?;
            let meta = vec![SampleMeta { iteration: config.iterations, step_size: 0.0 }];
            Ok(Fit { posterior: set(vec![ParameterVector(fit.theta)], meta)?, final_loss: fit.final_loss })
        }
        EstimatorKind::Sgld => chain_fit(run_sgld(&pot, config, schedule)?),
        EstimatorKind::Recast => chain_fit(run_recast(&pot, config, schedule)?),
        EstimatorKind::Mcd => {
            if spec.dropout <= 0.0 {
                return Err(Error::Config("MC dropout needs a dropout rate above 0".into()));
            }
            let fit = run_sgd(&pot.with_dropout(), config, schedule)?;
            Ok(Fit {
                posterior: Posterior::Dropout { spec: spec.clone(), weights: ParameterVector(fit.theta) },
                final_loss: fit.final_loss,
            })
        }
        EstimatorKind::Vi => {
            let (q, final_loss) = run_vi(&pot, config, schedule)?;
            Ok(Fit { posterior: Posterior::Variational { spec: spec.clone(), q }, final_loss })
        }
        EstimatorKind::Ensemble => {
            let fits = run_ensemble(&pot, config, schedule, members)?;
            let final_loss = fits.iter().map(|f| f.final_loss).sum::<f64>() / fits.len() as f64;
            let meta = (0..fits.len())
                .map(|_| SampleMeta { iteration: config.iterations, step_size: 0.0 })
                .collect();
            let samples = fits.into_iter().map(|f| ParameterVector(f.theta)).collect();
            Ok(Fit { posterior: set(samples, meta)?, final_loss })
        }
    }
}

/// Indices of `draws` evenly spaced members of a set of `available`.
pub fn spaced_indices(available: usize, draws: usize) -> Vec<usize> {
    (0..draws).map(|t| t * available / draws).collect()
}

/// `draws` predictive rows for every input in `x`. Finite sets contribute
/// evenly spaced members in collection order; dropout and variational
/// posteriors draw fresh masks or weights from streams of `seed`.
pub fn draw_predictive(
    posterior: &Posterior,
    x: &Tensor,
    draws: usize,
    seed: u64,
) -> Result<Vec<PredictiveSample>> {
    if draws == 0 {
        return Err(Error::Argument("at least one predictive draw is needed".into()));
    }
    if let Some(available) = posterior.available() {
        if draws > available {
            return Err(Error::Range { requested: draws, available });
        }
    }
    let spec = posterior.spec();
    let k = spec.classes;
    let batch = x.shape().first().copied().unwrap_or(0);
    let per = spec.input_len();
    let mut rows = vec![vec![0.0; draws * k]; batch];
    for t in 0..draws {
        let mut rng = seeded(derive_seed(seed, t as u64));
        let owned;
        let theta = match posterior {
            Posterior::Samples(s) => &s.samples[spaced_indices(s.samples.len(), draws)[t]],
            Posterior::Dropout { weights, .. } => weights,
            Posterior::Variational { q, .. } => {
                owned = ParameterVector(q.draw(&mut rng));
                &owned
            }
        };
        for start in (0..batch).step_by(PREDICT_CHUNK) {
            let n = PREDICT_CHUNK.min(batch - start);
            let mut shape = x.shape().to_vec();
            shape[0] = n;
            let chunk = Tensor::new(shape, x.data()[start * per..(start + n) * per].to_vec())?;
            let masks = matches!(posterior, Posterior::Dropout { .. })
                .then(|| DropoutMasks::sample(spec, n, &mut rng));
            let probs = predict(spec, theta, &chunk, masks.as_ref())?;
            for (i, p) in probs.data().chunks(k).enumerate() {
                rows[start + i][t * k..(t + 1) * k].copy_from_slice(p);
            }
        }
    }
    rows.into_iter()
        .map(|r| PredictiveSample::new(draws, k, r))
        .collect()
}
