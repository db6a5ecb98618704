use dem::DemError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration.
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<DemError> for CliError {
    fn from(e: DemError) -> Self {
        let msg = e.to_string();
        match e {
            DemError::Parameter(_) => CliError::Usage(msg),
            DemError::Data(_) | DemError::Io(_) => CliError::Data(msg),
            DemError::NotPositiveDefinite { .. } | DemError::Numerical { .. } => CliError::Numerical(msg),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
