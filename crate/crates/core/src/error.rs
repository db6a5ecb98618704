use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemError {
    /// An argument violated a documented precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A matrix that must be symmetric positive definite was not.
    #[error("matrix `{block}` is not positive definite")]
    NotPositiveDefinite { block: String },

    /// The optimization or filtering diverged or lost definiteness.
    #[error("numerical failure in {stage}: {detail}")]
    Numerical { stage: String, detail: String },

    /// Input data did not match the expected schema.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(String),
}

impl DemError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        DemError::Parameter(msg.into())
    }

    pub(crate) fn numerical(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        DemError::Numerical {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn not_pd(block: impl Into<String>) -> Self {
        DemError::NotPositiveDefinite {
            block: block.into(),
        }
    }
}

impl From<std::io::Error> for DemError {
    fn from(e: std::io::Error) -> Self {
        DemError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DemError>;
