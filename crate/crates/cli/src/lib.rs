//! Experiment runner for split-diffusion cut-point sweeps.

pub mod args;
pub mod config;
pub mod error;
pub mod fsio;
pub mod hash;
pub mod results;
pub mod sweep;

pub use config::{ExperimentConfig, Preset};
pub use error::{CliError, Result};
pub use results::{CellRecord, RunDocument};
