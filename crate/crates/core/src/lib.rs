//! Bayesian domain-invariant learning at desk scale.
//!
//! Mean-field Gaussian layers for the last two layers of a small network, a
//! KL-based domain-invariance objective over class-matched samples from
//! different domains, episodic training on synthetic rotated domains, and the
//! evaluation/ablation tooling around it.

pub mod bayes_layers;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod distributions;
mod error;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
