use std::path::{Path, PathBuf};

use chanforge::error::{CheckpointError, DatasetError, DiffError, SimError, StatsError, TrainError};
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    /// Command-line usage errors, as reported by the argument parser.
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const NUMERIC: i32 = 5;
    pub const VALIDATION: i32 = 6;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("validation: {0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Numeric(_) => exit::NUMERIC,
            CliError::Validation(_) => exit::VALIDATION,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn dataset(path: &Path, e: DatasetError) -> Self {
        match e {
            DatasetError::Io(source) => CliError::io(path, source),
            other => CliError::Validation(format!("{}: {other}", path.display())),
        }
    }

    pub fn checkpoint(path: &Path, e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(source) => CliError::io(path, source),
            other => CliError::Validation(format!("{}: {other}", path.display())),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Diff(DiffError::NonFinite { .. }) => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Channel(_) => CliError::Validation(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::Validation(e.to_string())
    }
}
