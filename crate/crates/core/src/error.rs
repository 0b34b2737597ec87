use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates its documented constraint.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Caller-supplied data is malformed (bad ids, shape mismatches, ...).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("pitch extraction failed: {0}")]
    PitchExtraction(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite loss term `{term}` at step {step}")]
    NonFiniteLoss { term: String, step: usize },

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration or user input, as
    /// opposed to runtime or numeric failures.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Input(_) | Error::Compatibility(_)
        )
    }
}
