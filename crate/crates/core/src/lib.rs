//! Doubly robust augmented inverse-probability-weighted GEE for
//! cluster-randomized trials with missing outcomes, with a Monte Carlo
//! harness for studying the estimators' finite-sample behaviour.

pub mod cli;
pub mod correlation;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod glm;
pub mod simulate;
pub mod variance;

pub use error::{Error, Result};
