//! Stochastic-gradient Langevin sampling with warm-restart step sizes for
//! small neural classifiers, together with the usual Bayesian baselines,
//! uncertainty decompositions, calibration scoring and a mutilation harness.

pub mod calibration;
pub mod data;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        };
    }
    chapter!(Overview, "overview.md");
    chapter!(Autodiff, "autodiff.md");
    chapter!(Models, "models.md");
    chapter!(Samplers, "samplers.md");
    chapter!(Baselines, "baselines.md");
    chapter!(Uncertainty, "uncertainty.md");
    chapter!(Calibration, "calibration.md");
    chapter!(Data, "data.md");
    chapter!(Toy, "toy.md");
    chapter!(Cli, "cli.md");
    chapter!(Formats, "formats.md");
}
