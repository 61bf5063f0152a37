//! Sampler checks against one-dimensional targets with known moments.

use std::fmt;
use std::str::FromStr;

use crate::data::{mode_coverage, Moments, ToyPosteriorSpec};
use crate::error::{Error, Result};
use crate::estimators::{run_recast, run_sgld, EstimatorKind, SamplerConfig, ScheduleSpec, ToyPotential};

/// Relative moment error tolerated by the conjugate check.
pub const MOMENT_TOLERANCE: f64 = 0.05;
/// Minimum share of samples near each mode for the bimodal check.
pub const MODE_SHARE: f64 = 0.1;

const CONJUGATE_TRUE_MEAN: f64 = 1.0;
const CONJUGATE_OBS_VAR: f64 = 1.0;
const CONJUGATE_DATA_SEED: u64 = 7;
const BIMODAL_OFFSET: f64 = 2.0;
const BIMODAL_VARIANCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyFamily {
    Conjugate,
    Bimodal,
}

impl fmt::Display for ToyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyFamily::Conjugate => "conjugate",
            ToyFamily::Bimodal => "bimodal",
        })
    }
}

impl FromStr for ToyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conjugate" => Ok(ToyFamily::Conjugate),
            "bimodal" => Ok(ToyFamily::Bimodal),
            other => Err(Error::Config(format!("unknown toy family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun {
    pub family: ToyFamily,
    pub estimator: EstimatorKind,
    /// Observations for the conjugate family.
    pub observations: usize,
    /// `None` uses the preset length.
    pub iterations: Option<usize>,
    pub seed: u64,
}

impl ToyRun {
    pub fn new(family: ToyFamily, estimator: EstimatorKind, seed: u64) -> Self {
        Self { family, estimator, observations: 100, iterations: None, seed }
    }

    pub fn target(&self) -> ToyPosteriorSpec {
        match self.family {
            ToyFamily::Conjugate => ToyPosteriorSpec::conjugate(
                self.observations,
                CONJUGATE_TRUE_MEAN,
                CONJUGATE_OBS_VAR,
                CONJUGATE_DATA_SEED,
            ),
            ToyFamily::Bimodal => ToyPosteriorSpec::bimodal(BIMODAL_OFFSET, BIMODAL_VARIANCE),
        }
    }

    /// Preset loop settings and schedule. Conjugate step sizes scale with
    /// the posterior variance `v`.
    pub fn preset(&self, v: f64) -> Result<(SamplerConfig, ScheduleSpec)> {
        let full_batch = self.observations.clamp(1, 100);
        let (cfg, schedule) = match (self.family, self.estimator) {
            (ToyFamily::Conjugate, EstimatorKind::Sgld) => (
                SamplerConfig {
                    iterations: 100_000,
                    batch_size: full_batch,
                    burn_in: 0.1,
                    thinning: 1,
                    collect_threshold: None,
                    step_scale: 30.0 * v,
                    seed: self.seed,
                },
                ScheduleSpec::Polynomial { a: 1.0, b: 1e4, gamma: 0.55 },
            ),
            (ToyFamily::Conjugate, EstimatorKind::Recast) => (
                SamplerConfig {
                    iterations: 100_000,
                    batch_size: full_batch,
                    burn_in: 0.0,
                    thinning: 1,
                    collect_threshold: Some(0.18 * v),
                    step_scale: 1.0,
                    seed: self.seed,
                },
                ScheduleSpec::CosineRestart { eps_max: 0.3 * v, eps_min: 0.05 * v, period: 5000 },
            ),
            (ToyFamily::Bimodal, EstimatorKind::Sgld) => (
                SamplerConfig {
                    iterations: 40_000,
                    batch_size: 1,
                    burn_in: 0.1,
                    thinning: 10,
                    collect_threshold: None,
                    step_scale: 0.05,
                    seed: self.seed,
                },
                ScheduleSpec::polynomial_default(),
            ),
            (ToyFamily::Bimodal, EstimatorKind::Recast) => (
                SamplerConfig {
                    iterations: 40_000,
                    batch_size: 1,
                    burn_in: 0.0,
                    thinning: 10,
                    collect_threshold: None,
                    step_scale: 1.0,
                    seed: self.seed,
                },
                ScheduleSpec::CosineRestart { eps_max: 0.8, eps_min: 0.8 * 0.0057, period: 2000 },
            ),
            (_, other) => {
                return Err(Error::Config(format!("toy targets support sgld and recast, not {other}")))
            }
        };
        let cfg = SamplerConfig { iterations: self.iterations.unwrap_or(cfg.iterations), ..cfg };
        Ok((cfg, schedule))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReport {
    pub run: ToyRun,
    pub analytic: Moments,
    pub empirical: Moments,
    /// `|m - m*| / max(|m*|, sd*)`.
    pub mean_error: f64,
    /// `|v - v*| / v*`.
    pub variance_error: f64,
    /// Share of samples within three standard deviations of each mode.
    pub coverage: Option<Vec<f64>>,
    pub samples: usize,
    /// Conjugate: both errors under [`MOMENT_TOLERANCE`]. Bimodal: every
    /// mode holds at least [`MODE_SHARE`] of the samples.
    pub pass: bool,
}

impl fmt::Display for ToyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} target, {} sampler, seed {}", self.run.family, self.run.estimator, self.run.seed)?;
        writeln!(f, "samples        {}", self.samples)?;
        writeln!(f, "mean           analytic {:.6}  empirical {:.6}  error {:.4}", self.analytic.mean, self.empirical.mean, self.mean_error)?;
        writeln!(
            f,
            "variance       analytic {:.6}  empirical {:.6}  error {:.4}",
            self.analytic.variance, self.empirical.variance, self.variance_error
        )?;
        if let Some(c) = &self.coverage {
            let shares: Vec<String> = c.iter().map(|s| format!("{s:.3}")).collect();
            writeln!(f, "mode coverage  {}", shares.join(" "))?;
        }
        write!(f, "result         {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// Sample mean and unbiased variance.
pub fn sample_moments(x: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let variance = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Moments { mean, variance }
}

pub fn cmd_toy(run: &ToyRun) -> Result<ToyReport> {
    let target = run.target();
    target.validate()?;
    let analytic = target.moments()?;
    let (cfg, schedule) = run.preset(analytic.variance)?;
    let start = match run.family {
        ToyFamily::Conjugate => 0.0,
        ToyFamily::Bimodal => BIMODAL_OFFSET,
    };
    let pot = ToyPotential { spec: target, start };
    let chain = match run.estimator {
        EstimatorKind::Recast => run_recast(&pot, &cfg, &schedule)?,
        _ => run_sgld(&pot, &cfg, &schedule)?,
    };
    let samples = chain.scalar_samples();
    if samples.len() < 2 {
        return Err(Error::Config(format!("only {} samples collected", samples.len())));
    }
    let empirical = sample_moments(&samples);
    let mean_error = (empirical.mean - analytic.mean).abs() / analytic.mean.abs().max(analytic.variance.sqrt());
    let variance_error = (empirical.variance - analytic.variance).abs() / analytic.variance;
    let (coverage, pass) = match run.family {
        ToyFamily::Conjugate => (None, mean_error < MOMENT_TOLERANCE && variance_error < MOMENT_TOLERANCE),
        ToyFamily::Bimodal => {
            let sd = BIMODAL_VARIANCE.sqrt();
            let c = mode_coverage(&samples, &[-BIMODAL_OFFSET, BIMODAL_OFFSET], &[sd, sd]);
            let pass = c.iter().all(|&s| s >= MODE_SHARE);
            (Some(c), pass)
        }
    };
    Ok(ToyReport {
        run: run.clone(),
        analytic,
        empirical,
        mean_error,
        variance_error,
        coverage,
        samples: samples.len(),
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_parse() {
        assert_eq!("bimodal".parse::<ToyFamily>().unwrap(), ToyFamily::Bimodal);
        assert!("trimodal".parse::<ToyFamily>().is_err());
    }

    #[test]
    fn other_estimators_are_rejected() {
        let run = ToyRun::new(ToyFamily::Conjugate, EstimatorKind::Vi, 0);
        assert!(matches!(cmd_toy(&run), Err(Error::Config(_))));
    }

    #[test]
    fn short_conjugate_run_reports() {
        let run = ToyRun { iterations: Some(2000), ..ToyRun::new(ToyFamily::Conjugate, EstimatorKind::Sgld, 1) };
        let r = cmd_toy(&run).unwrap();
        assert_eq!(r.samples, 1800);
        assert!(r.coverage.is_none());
        assert!(r.to_string().contains("variance"));
    }
}
