//! Error taxonomy shared across the crate.
//!
//! Two families matter at the boundary: validation errors (bad arguments,
//! violated preconditions, malformed inputs) and runtime errors (IO trouble,
//! iterations that fail to converge). The CLI maps them to exit codes 1 and 2.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed in something that can never work: bad shapes, parameters
    /// outside their domain, violated preconditions.
    #[error("validation: {0}")]
    Validation(String),

    /// An API contract was broken at runtime, e.g. a gradient tape replayed
    /// against parameters it was not recorded with.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numerical routine gave up: singular system, iteration cap hit,
    /// divergence detected where convergence was required.
    #[error("numerical: {0}")]
    Numerical(String),

    /// Malformed input data; `offset` is the byte position where parsing
    /// stopped making sense.
    #[error("parse error at byte {offset}: {message}")]
    Parse { message: String, offset: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Exit code the CLI should use for this error: 1 for validation-class
    /// failures, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Contract(_) | Error::Parse { .. } => 1,
            Error::Numerical(_) | Error::Io(_) | Error::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Bail out with a validation error unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !($cond) {
            return Err($crate::error::Error::Validation(format!($($arg)*)));
        }
    };
}

pub(crate) use ensure;
