use std::path::Path;

use stdgrl_core::data::DataError;
use stdgrl_core::model::ModelError;
use stdgrl_core::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, data or arguments: exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Anything that fails after validation: exit code 2.
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) | CliError::Io(_) => 2,
        }
    }

    pub fn data(path: &Path, e: DataError) -> Self {
        match e {
            DataError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
            other => CliError::Validation(format!("{}: {other}", path.display())),
        }
    }

    pub fn checkpoint(path: &Path, e: ModelError) -> Self {
        match e {
            ModelError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
            other => CliError::Validation(format!("{}: {other}", path.display())),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::UnobservedSlot(_) | TrainError::EmptyWindows => {
                CliError::Validation(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
