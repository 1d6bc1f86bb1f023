//! Numerical laboratory for in-context filtering with selective state-space
//! models: data generation from random dynamical systems, a recurrent
//! filtering network with exact gradients, Kalman baselines, evaluation
//! harnesses, and probes of stability and robustness constants.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod probe;
pub mod rng;
pub mod ssm;
pub mod systems;
pub mod train;

pub use error::{Error, Result};
