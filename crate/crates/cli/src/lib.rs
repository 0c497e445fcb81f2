//! Command-line layer: run configuration, the six modes, and report
//! emission.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use config::{Mode, RunConfig, Workdir};
pub use error::{exit, CliError};
