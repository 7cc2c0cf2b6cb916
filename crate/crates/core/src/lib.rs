//! Tweedie's formulae for scalar diffusions.

pub mod dsm;
pub mod empirical_bayes;
pub mod error;
pub mod oracle;
pub mod process;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod special_fn;
pub mod stats;
pub mod tweedie;

pub use error::{Error, Result};
pub use process::{CoefficientSchedule, Family, InitialMap, IntegralKind, Prior, ProcessSpec, Shape};
pub use rng::RngStream;
