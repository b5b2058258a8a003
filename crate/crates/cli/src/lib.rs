//! Command-line experiment runner: config parsing, data preparation,
//! multi-seed training, evaluation, ablation sweeps and reporting.

pub mod cli;
pub mod config;
pub mod run;

pub use config::{DataConfig, ExperimentConfig};
pub use run::{run_ablation, run_experiment, Failure, Prepared, Summary};
