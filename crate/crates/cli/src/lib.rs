//! Experiment harness for `butterfly-hessian`.
//!
//! Runs the synthetic, rotation, n_mu-sweep, covariance, optimizer and cost
//! experiments, reads IDX and CSV data, and writes CSV tables and SVG plots.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod plot;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
