use std::path::{Path, PathBuf};

use crate::data::{MutilationKind, MutilationSpec, NoiseScale};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, SamplerConfig, ScheduleSpec};
use crate::model::{Architecture, ModelSpec, PriorSpec};

/// Everything a `train` or `sweep` run needs. Fields map one-to-one onto
/// `key = value` lines of a config file and onto command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub estimator: EstimatorKind,
    pub model: Architecture,
    pub hidden: Vec<usize>,
    /// Dropout rate; `None` means 0.5 for MC dropout and 0 otherwise.
    pub dropout: Option<f64>,
    pub prior_variance: f64,
    pub data_dir: PathBuf,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub burn_in: f64,
    pub thinning: usize,
    pub restart_period: usize,
    pub eps_max: f64,
    pub eps_min: f64,
    pub decay_a: f64,
    pub decay_b: f64,
    pub decay_gamma: f64,
    pub collect_threshold: Option<f64>,
    /// `None` picks a per-estimator default, see [`ExperimentConfig::effective_step_scale`].
    pub step_scale: Option<f64>,
    pub members: usize,
    pub draws: usize,
    pub mutilation: MutilationKind,
    pub noise_scale: NoiseScale,
    pub repetitions: usize,
    pub retrain_per_rep: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Recast,
            model: Architecture::Mlp,
            hidden: vec![256],
            dropout: None,
            prior_variance: 1.0,
            data_dir: PathBuf::from("data/mnist"),
            train_subset: None,
            test_subset: None,
            iterations: 12_000,
            batch_size: 100,
            burn_in: 0.5,
            thinning: 10,
            restart_period: 2000,
            eps_max: 1.0,
            eps_min: 0.0057,
            decay_a: 1.0,
            decay_b: 1.0,
            decay_gamma: 0.55,
            collect_threshold: None,
            step_scale: None,
            members: 12,
            draws: 30,
            mutilation: MutilationKind::Noise,
            noise_scale: NoiseScale::Std,
            repetitions: 5,
            retrain_per_rep: false,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "none" || value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse `{value}` for `{key}` as a boolean"))),
    }
}

impl ExperimentConfig {
    /// Sets one field by name. Dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "estimator" => self.estimator = v.parse()?,
            "model" => self.model = v.parse()?,
            "hidden" => {
                self.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|h| parse(&key, h.trim())).collect::<Result<_>>()?
                }
            }
            "dropout" => self.dropout = parse_opt(&key, v)?,
            "prior_variance" => self.prior_variance = parse(&key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "train_subset" => self.train_subset = parse_opt(&key, v)?,
            "test_subset" => self.test_subset = parse_opt(&key, v)?,
            "iterations" => self.iterations = parse(&key, v)?,
            "batch_size" => self.batch_size = parse(&key, v)?,
            "burn_in" => self.burn_in = parse(&key, v)?,
            "thinning" => self.thinning = parse(&key, v)?,
            "restart_period" => self.restart_period = parse(&key, v)?,
            "eps_max" => self.eps_max = parse(&key, v)?,
            "eps_min" => self.eps_min = parse(&key, v)?,
            "decay_a" => self.decay_a = parse(&key, v)?,
            "decay_b" => self.decay_b = parse(&key, v)?,
            "decay_gamma" => self.decay_gamma = parse(&key, v)?,
            "collect_threshold" => self.collect_threshold = parse_opt(&key, v)?,
            "step_scale" => self.step_scale = parse_opt(&key, v)?,
            "members" => self.members = parse(&key, v)?,
            "draws" => self.draws = parse(&key, v)?,
            "mutilation" => self.mutilation = v.parse()?,
            "noise_scale" => self.noise_scale = v.parse()?,
            "repetitions" => self.repetitions = parse(&key, v)?,
            "retrain_per_rep" => self.retrain_per_rep = parse_bool(&key, v)?,
            "seed" => self.seed = parse(&key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a line-oriented `key = value` text. `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.draws == 0 {
            return Err(Error::Config("draws must be at least 1".into()));
        }
        if self.estimator == EstimatorKind::Ensemble && self.members < 2 {
            return Err(Error::Config("an ensemble needs at least 2 members".into()));
        }
        self.schedule().validate()?;
        self.sampler().validate(0)?;
        PriorSpec::new(self.prior_variance)?;
        self.model_spec(1, 28, 28, 10).validate()
    }

    pub fn effective_dropout(&self) -> f64 {
        self.dropout.unwrap_or(if self.estimator == EstimatorKind::Mcd { 0.5 } else { 0.0 })
    }

    /// Step scale (samplers) or learning rate (optimisers). Defaults were
    /// chosen for the MNIST networks with 100-example minibatches.
    pub fn effective_step_scale(&self) -> f64 {
        self.step_scale.unwrap_or(match self.estimator {
            EstimatorKind::Sgld => 1e-4,
            EstimatorKind::Recast => 1e-5,
            EstimatorKind::Vi => 1e-3,
            EstimatorKind::Sgd | EstimatorKind::Mcd | EstimatorKind::Ensemble => 0.1,
        })
    }

    pub fn model_spec(&self, channels: usize, height: usize, width: usize, classes: usize) -> ModelSpec {
        let spec = match self.model {
            Architecture::LeNet5 => ModelSpec::lenet5(channels, height, width, classes),
            Architecture::Mlp => ModelSpec::mlp(channels * height * width, &self.hidden, classes),
        };
        spec.with_dropout(self.effective_dropout())
    }

    pub fn schedule(&self) -> ScheduleSpec {
        match self.estimator {
            EstimatorKind::Sgld => ScheduleSpec::Polynomial {
                a: self.decay_a,
                b: self.decay_b,
                gamma: self.decay_gamma,
            },
            EstimatorKind::Recast => ScheduleSpec::CosineRestart {
                eps_max: self.eps_max,
                eps_min: self.eps_min,
                period: self.restart_period,
            },
            _ => ScheduleSpec::Constant(1.0),
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            burn_in: self.burn_in,
            thinning: self.thinning,
            collect_threshold: self.collect_threshold,
            step_scale: self.effective_step_scale(),
            seed: self.seed,
        }
    }

    pub fn prior(&self) -> Result<PriorSpec> {
        PriorSpec::new(self.prior_variance)
    }

    pub fn mutilation_spec(&self, seed: u64) -> MutilationSpec {
        MutilationSpec { kind: self.mutilation, noise_scale: self.noise_scale, seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_lines_and_comments() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_str("# comment\nestimator = sgld\niterations=500 # trailing\n\nhidden = 64, 32\nstep-scale = 0.01\nretrain_per_rep = true\n")
            .unwrap();
        assert_eq!(cfg.estimator, EstimatorKind::Sgld);
        assert_eq!(cfg.iterations, 500);
        assert_eq!(cfg.hidden, vec![64, 32]);
        assert_eq!(cfg.step_scale, Some(0.01));
        assert!(cfg.retrain_per_rep);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn bad_lines_are_config_errors() {
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(cfg.apply_str("iterations 5"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_str("colour = red"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_str("iterations = lots"), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_follow_the_estimator() {
        let mut cfg = ExperimentConfig { estimator: EstimatorKind::Mcd, ..Default::default() };
        assert_eq!(cfg.effective_dropout(), 0.5);
        cfg.estimator = EstimatorKind::Recast;
        assert_eq!(cfg.effective_dropout(), 0.0);
        assert_eq!(cfg.schedule(), ScheduleSpec::cosine_default());
        cfg.repetitions = 0;
        assert!(cfg.validate().is_err());
    }
}
