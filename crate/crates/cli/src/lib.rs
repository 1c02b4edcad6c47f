//! Experiment runner for the nirvis toolkit: config resolution, one function
//! per subcommand, and the table reproduction pipeline.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod tables;

pub use commands::Run;
pub use config::{ExperimentConfig, Overrides};
