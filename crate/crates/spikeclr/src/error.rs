//! Error type shared across the crate, with the process exit code each
//! failure class maps to.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or command-line usage.
    #[error("config error: {0}")]
    Config(String),

    /// Shape or precondition violation in a numeric op.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Malformed or missing input data.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint serialization/deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Caller broke an internal contract (mismatched keys, bad state).
    #[error("contract error: {0}")]
    Contract(String),

    /// Analytic and numeric gradients disagree.
    #[error("gradient check failed: {0}")]
    Gradcheck(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for this error: 1 for validation problems,
    /// 3 for gradient-check failures, 2 for everything hit at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } => 1,
            Error::Gradcheck(_) => 3,
            Error::Data(_) | Error::Checkpoint(_) | Error::Contract(_) | Error::Io(_) => 2,
        }
    }
}
