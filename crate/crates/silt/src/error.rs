use thiserror::Error;

/// Errors surfaced by the simulation library.
///
/// `Input` covers precondition violations (bad parameters, domain
/// violations, mass mismatches), `Numerical` covers runtime linear-algebra
/// or integration failures, `Budget` is the refusal path for estimators
/// whose cost or variance would be unreasonable with the given parameters.
#[derive(Debug, Error)]
pub enum SiltError {
    #[error("input error: {0}")]
    Input(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SiltError {
    pub fn input(msg: impl Into<String>) -> Self {
        SiltError::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        SiltError::Numerical(msg.into())
    }

    pub fn budget(msg: impl Into<String>) -> Self {
        SiltError::Budget(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, SiltError>;
