use wisca_core::checkpoint::layout::LayoutError;
use wisca_core::checkpoint::CheckpointError;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Equivalence(String),
    #[error("{0}")]
    Structural(String),
    #[error("{0}")]
    Assertion(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Parse(_) => 2,
            CliError::Equivalence(_) => 3,
            CliError::Structural(_) => 4,
            CliError::Assertion(_) => 5,
        }
    }

    pub fn io(context: impl std::fmt::Display, e: std::io::Error) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Parse(other.to_string()),
        }
    }
}

impl From<LayoutError> for CliError {
    fn from(e: LayoutError) -> Self {
        match e {
            LayoutError::Io(_) | LayoutError::Checkpoint(CheckpointError::Io(_)) => CliError::Io(e.to_string()),
            other => CliError::Parse(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
