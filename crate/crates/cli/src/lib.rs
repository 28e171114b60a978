//! Command-line driver: configuration, experiment layout and subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;
pub mod workspace;

pub use config::ExperimentConfig;
pub use error::{Category, CliError};
