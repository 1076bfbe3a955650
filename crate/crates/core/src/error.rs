//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV file {path}: {reason}")]
    WavFormat { path: String, reason: String },

    #[error("unsupported WAV codec in {path}: {reason}")]
    WavUnsupported { path: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("autodiff usage error: {0}")]
    AutodiffUsage(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad configuration or arguments rather than
    /// runtime failures. The CLI maps these to exit code 2.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArg(_))
    }
}
