//! Global sensitivity of Bayesian inverse problems to prior hyperparameters.
//!
//! One MCMC run under a covering prior is reweighted by importance sampling to
//! any member of a Gaussian prior family. Posterior statistics as functions of
//! the hyperparameters are then fitted with surrogates (sparse polynomial chaos
//! and sparse-weight extreme learning machines) whose Sobol indices are
//! available without further sampling.

pub mod benchmarks;
pub mod error;
pub mod gsa;
pub mod hsmaps;
pub mod importance;
pub mod io;
pub mod optim;
pub mod problem;
pub mod sampling;
pub mod surrogates;

pub use error::{Error, Result, StageExt};
