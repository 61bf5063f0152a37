use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Dataset, ToyPosteriorSpec};
use crate::error::{Error, Result};
use crate::model::{log_likelihood_grad, DropoutMasks, ModelSpec, PriorSpec};
use crate::rng::SeededRng;

/// An unnormalised log posterior `log p(theta) + sum_i log p(x_i | theta)`
/// whose likelihood can be evaluated on index subsets of the data.
pub trait Potential: Sync {
    fn dim(&self) -> usize;

    /// Number of likelihood terms; 0 when the target has no data.
    fn data_len(&self) -> usize;

    /// Adds the prior score into `grad`.
    fn add_prior_grad(&self, theta: &[f64], grad: &mut [f64]);

    /// Adds `sum_{i in batch} grad log p(x_i | theta)` into `grad` and returns
    /// the summed log-likelihood.
    fn add_likelihood_grad(
        &self,
        theta: &[f64],
        batch: &[usize],
        rng: &mut SeededRng,
        grad: &mut [f64],
    ) -> Result<f64>;

    /// Starting point for a chain or optimiser.
    fn init(&self, rng: &mut SeededRng) -> Vec<f64>;

    /// `(mean, variance)` of an isotropic Gaussian prior, if the prior is one.
    fn gaussian_prior(&self) -> Option<(f64, f64)>;
}

/// Classifier posterior over a labelled dataset. With `dropout` set, a fresh
/// mask is drawn for every likelihood evaluation.
#[derive(Debug, Clone, Copy)]
pub struct NetPotential<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub prior: PriorSpec,
    pub dropout: bool,
}

impl<'a> NetPotential<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a Dataset, prior: PriorSpec) -> Result<Self> {
        spec.validate()?;
        if data.sample_len() != spec.input_len() {
            return Err(Error::Data(format!(
                "samples of shape {:?} do not fit model input {:?}",
                data.feature_shape, spec.input_shape
            )));
        }
        if data.classes > spec.classes {
            return Err(Error::Data(format!(
                "dataset has {} classes, model only {}",
                data.classes, spec.classes
            )));
        }
        Ok(Self { spec, data, prior, dropout: false })
    }

    pub fn with_dropout(mut self) -> Self {
        self.dropout = true;
        self
    }
}

impl Potential for NetPotential<'_> {
    fn dim(&self) -> usize {
        self.spec.layout().len
    }

    fn data_len(&self) -> usize {
        self.data.len()
    }

    fn add_prior_grad(&self, theta: &[f64], grad: &mut [f64]) {
        self.prior.add_grad(theta, grad);
    }

    fn add_likelihood_grad(
        &self,
        theta: &[f64],
        batch: &[usize],
        rng: &mut SeededRng,
        grad: &mut [f64],
    ) -> Result<f64> {
        let (x, y) = self.data.gather(batch);
        let masks = self
            .dropout
            .then(|| DropoutMasks::sample(self.spec, batch.len(), rng));
        log_likelihood_grad(self.spec, theta, &x, &y, masks.as_ref(), grad)
    }

    fn init(&self, rng: &mut SeededRng) -> Vec<f64> {
        self.spec.init_params(rng).0
    }

    fn gaussian_prior(&self) -> Option<(f64, f64)> {
        Some((self.prior.mean, self.prior.variance))
    }
}

/// A one-dimensional toy target started from a fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPotential {
    pub spec: ToyPosteriorSpec,
    pub start: f64,
}

impl Potential for ToyPotential {
    fn dim(&self) -> usize {
        1
    }

    fn data_len(&self) -> usize {
        match &self.spec {
            ToyPosteriorSpec::ConjugateGaussian { data, .. } => data.len(),
            ToyPosteriorSpec::BimodalMixture { .. } => 0,
        }
    }

    fn add_prior_grad(&self, theta: &[f64], grad: &mut [f64]) {
        grad[0] += match &self.spec {
            ToyPosteriorSpec::ConjugateGaussian { prior_mean, prior_var, .. } => {
                -(theta[0] - prior_mean) / prior_var
            }
            ToyPosteriorSpec::BimodalMixture { .. } => self.spec.mixture_score(theta[0]),
        };
    }

    fn add_likelihood_grad(
        &self,
        theta: &[f64],
        batch: &[usize],
        _rng: &mut SeededRng,
        grad: &mut [f64],
    ) -> Result<f64> {
        let ToyPosteriorSpec::ConjugateGaussian { obs_var, data, .. } = &self.spec else {
            return Ok(0.0);
        };
        let mut ll = 0.0;
        for &i in batch {
            let r = data[i] - theta[0];
            grad[0] += r / obs_var;
            ll -= r * r / (2.0 * obs_var) + 0.5 * (std::f64::consts::TAU * obs_var).ln();
        }
        Ok(ll)
    }

    fn init(&self, _rng: &mut SeededRng) -> Vec<f64> {
        vec![self.start]
    }

    fn gaussian_prior(&self) -> Option<(f64, f64)> {
        match &self.spec {
            ToyPosteriorSpec::ConjugateGaussian { prior_mean, prior_var, .. } => {
                Some((*prior_mean, *prior_var))
            }
            ToyPosteriorSpec::BimodalMixture { .. } => None,
        }
    }
}

/// Index minibatches drawn without replacement, reshuffled every epoch.
/// A trailing partial batch is dropped.
pub struct Minibatches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: SeededRng,
}

impl Minibatches {
    pub fn new(n: usize, size: usize, rng: SeededRng) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: 0,
            size: size.min(n),
            rng,
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.size;
        &self.order[start..self.pos]
    }
}

/// Zeroes `grad`, then fills it with the minibatch estimate of the log
/// posterior score, `grad log p(theta) + (N / n) sum_batch grad log p(x_i | theta)`.
/// Returns the matching rescaled log-likelihood.
pub fn posterior_grad<P: Potential + ?Sized>(
    pot: &P,
    theta: &[f64],
    batch: &[usize],
    rng: &mut SeededRng,
    grad: &mut [f64],
) -> Result<f64> {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut ll = 0.0;
    if !batch.is_empty() {
        ll = pot.add_likelihood_grad(theta, batch, rng, grad)?;
        let scale = pot.data_len() as f64 / batch.len() as f64;
        if scale != 1.0 {
            grad.iter_mut().for_each(|g| *g *= scale);
            ll *= scale;
        }
    }
    pot.add_prior_grad(theta, grad);
    Ok(ll)
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng)
}
