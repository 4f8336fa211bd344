use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A loss, density or energy evaluated to NaN or infinity. `index` names
    /// the first parameter whose gradient was non-finite, when there is one.
    #[error("non-finite {what}{}", .index.map(|i| format!(" (parameter {i})")).unwrap_or_default())]
    NonFinite { what: String, index: Option<usize> },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn non_finite(what: impl Into<String>, index: Option<usize>) -> Self {
        Error::NonFinite {
            what: what.into(),
            index,
        }
    }
}
