//! Error types shared across the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates an operation's domain (out-of-range value,
    /// dimension mismatch, too few angles, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration (non-compressing sensing dims, empty dilation
    /// set, bad hyperparameter, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// The support is too large or too ill-conditioned for the exact
    /// reconstruction-layer backprop rules; callers fall back to the
    /// approximate rules.
    #[error("singular support: {0}")]
    SingularSupport(String),

    /// A numeric procedure failed (solver did not converge, loss went
    /// non-finite). Carries diagnostics.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Synthetic scene generation could not satisfy the constraints within
    /// the retry budget.
    #[error("generation error: {0}")]
    Generation(String),

    /// A file could not be parsed; names the offending location.
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
