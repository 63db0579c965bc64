//! Experiment runner for embedding-loss distillation: config parsing,
//! pipelines for each CLI subcommand, and CSV/SVG/checkpoint artifacts.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod error;
pub mod run;

pub use cli::cli_dispatch;
pub use config::ExperimentConfig;
pub use error::{BenchError, Result};
pub use run::run_experiment;
