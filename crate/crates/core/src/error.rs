use thiserror::Error;

/// Failure modes shared by every module.
///
/// The CLI maps these onto exit codes: invalid input is 1, infeasible
/// parameters are 2, and broken invariants or numerical failures are 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("infeasible parameters: {0}")]
    Infeasible(String),
    #[error("{property} violated at {witness}")]
    Violation { property: String, witness: String },
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }

    pub fn violation(property: impl Into<String>, witness: impl Into<String>) -> Self {
        Error::Violation {
            property: property.into(),
            witness: witness.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Io(_) | Error::Json(_) => 1,
            Error::Infeasible(_) => 2,
            Error::Violation { .. } | Error::NoConvergence(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
