//! Importance-weighted kernel ridge regression under covariate shift.

pub mod classify;
pub mod experiments;
pub mod kernel;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod solver;
pub mod spectrum;
pub mod weights;

#[cfg(test)]
mod testutil;

pub use kernel::{GramMatrix, KernelFamily, KernelSpec, Point};
pub use solver::{fit_iwkrr, fit_with_weights, FitModel, FitOptions, SolveError, TrainingSet};
pub use weights::{DensityModel, WeightStrategy};
