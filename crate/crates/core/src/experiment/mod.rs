//! Config parsing, benchmark runs and the command-line interface.

pub mod cli;
pub mod config;
pub mod runner;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use runner::{run_benchmark, run_with_data, RunArtifacts, RunObserver, RunSummary, Splits};
