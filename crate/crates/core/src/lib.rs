//! Conditional distribution learning: a generator `T(x, u)` pushes uniform
//! noise to the response law at covariate `x`, fitted to kernel CDF estimates
//! and regularized by entropic optimal transport between neighboring
//! covariates.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the CLI and file formats use.

pub mod cli;
pub mod condcdf;
pub mod data;
pub mod diffnet;
pub mod eotreg;
pub mod error;
pub mod metrics;
pub mod pairgraph;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Mlp = diffnet::MlpNet<f64>;
pub type KdeCdf = condcdf::ConditionalCdf<f64>;
pub type Sample = metrics::EmpiricalSample<f64>;
pub type Measure = eotreg::DiscreteMeasure<f64>;
pub type State = trainer::TrainState<f64>;
pub type Sampler = trainer::ConditionalSampler<f64>;
pub type TrainCheckpoint = trainer::Checkpoint<f64>;
