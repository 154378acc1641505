//! Benchmark driver for EP-CV hyperparameter selection.

pub mod config;
pub mod error;
pub mod run;

pub use config::{RunConfig, Settings};
pub use error::{CliError, Result};
