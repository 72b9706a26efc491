use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Unsupported or malformed header content.
    #[error("format error in field `{field}`: {message}")]
    Format { field: String, message: String },

    /// Header and payload disagree.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Data violates a type invariant (non-finite values, bad labels, bad geometry).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("shape error at {stage}: {message}")]
    Shape { stage: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

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
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            stage: stage.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format { .. } => "format",
            Error::Integrity(_) => "integrity",
            Error::Validation(_) => "validation",
            Error::Degenerate(_) => "degenerate",
            Error::Sampling(_) => "sampling",
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
