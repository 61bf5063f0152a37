use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Step-size sequences. Values are multiplied by the sampler's step scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSpec {
    /// `a (b + t)^-gamma`.
    Polynomial { a: f64, b: f64, gamma: f64 },
    /// Cosine annealing from `eps_max` to `eps_min`, restarting every `period` iterations.
    CosineRestart { eps_max: f64, eps_min: f64, period: usize },
    Constant(f64),
}

impl ScheduleSpec {
    pub const fn polynomial_default() -> Self {
        ScheduleSpec::Polynomial { a: 1.0, b: 1.0, gamma: 0.55 }
    }

    pub const fn cosine_default() -> Self {
        ScheduleSpec::CosineRestart { eps_max: 1.0, eps_min: 0.0057, period: 2000 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScheduleSpec::Polynomial { a, b, gamma } => a > 0.0 && b > 0.0 && gamma > 0.0,
            ScheduleSpec::CosineRestart { eps_max, eps_min, period } => {
                eps_min >= 0.0 && eps_min < eps_max && period >= 2
            }
            ScheduleSpec::Constant(eps) => eps >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid step-size schedule {self:?}")))
        }
    }

    pub fn step_size(&self, t: usize) -> f64 {
        match *self {
            ScheduleSpec::Polynomial { a, b, gamma } => a * (b + t as f64).powf(-gamma),
            ScheduleSpec::CosineRestart { eps_max, eps_min, period } => {
                let phase = (t % period) as f64 / period as f64;
                eps_min + 0.5 * (eps_max - eps_min) * (1.0 + (PI * phase).cos())
            }
            ScheduleSpec::Constant(eps) => eps,
        }
    }

    /// Default sample-collection threshold: five percent of the way from
    /// `eps_min` to `eps_max`.
    pub fn default_collect_threshold(&self) -> Option<f64> {
        match *self {
            ScheduleSpec::CosineRestart { eps_max, eps_min, .. } => {
                Some(eps_min + 0.05 * (eps_max - eps_min))
            }
            _ => None,
        }
    }

    pub fn period(&self) -> Option<usize> {
        match *self {
            ScheduleSpec::CosineRestart { period, .. } => Some(period),
            _ => None,
        }
    }
}
