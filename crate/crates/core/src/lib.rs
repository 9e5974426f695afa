//! Probabilistic forecasting with coarse-to-fine autoregressive binned
//! output distributions and Pareto tails.

pub mod baselines;
#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod dist;
pub mod error;
pub mod hbin;
pub mod metrics;
pub mod model;
pub mod neural;
pub mod pipeline;
pub mod tune;

pub use error::{Error, Result};
