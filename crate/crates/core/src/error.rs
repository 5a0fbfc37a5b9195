//! Crate-wide error type.

use std::path::PathBuf;

/// Unified error type for all fallible operations in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A structured text or binary file could not be parsed. `context` names
    /// the file and the offending record so the message is actionable.
    #[error("parse error ({file}): {msg}")]
    Parse { file: PathBuf, msg: String },

    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A world point projected to non-positive camera depth. Callers that
    /// probe many pixels treat this as "no observation" rather than a failure.
    #[error("point behind camera (depth {0})")]
    BehindCamera(f64),

    /// A computation produced NaN or infinity where finite values are required.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at iteration {iteration}: {msg}")]
    Training { iteration: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Convenience constructor for parse errors.
    pub fn parse(file: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            msg: msg.into(),
        }
    }
}
