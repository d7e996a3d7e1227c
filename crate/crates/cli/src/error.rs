use std::path::Path;

use moe_upcycle::experiment::ExperimentError;
use moe_upcycle::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Training(_) => 3,
        }
    }

    /// An input or output failure attributed to `path`.
    pub fn at(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    pub fn training(e: TrainError) -> Self {
        match e {
            TrainError::Config(msg) => CliError::Usage(format!("invalid training config: {msg}")),
            other => CliError::Training(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train { .. } => CliError::Training(e.to_string()),
            ExperimentError::UnknownProtocol(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
