//! Command implementations behind the `graspbench` binary.

pub mod commands;
pub mod config;

use graspbench_core::dataset::DatasetError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input data or arguments; exit status 1.
    #[error("{0}")]
    Validation(String),
    /// I/O, network or internal failure; exit status 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Runtime(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
