//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or plan parameters.
    #[error("config: {0}")]
    Config(String),

    /// A WAV file (or other ingested input) could not be parsed;
    /// `field` names the offending header field or chunk.
    #[error("ingest: bad {field}: {message}")]
    Ingest { field: String, message: String },

    /// Input too short to produce a single feature frame.
    #[error("empty features: waveform of {samples} samples is shorter than one window ({window} samples)")]
    EmptyFeatures { samples: usize, window: usize },

    /// Tensor shapes disagree.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// Two aligned collections have different lengths.
    #[error("misaligned: {0}")]
    Misaligned(String),

    /// Training aborted because the loss stopped improving and stayed
    /// above the divergence threshold.
    #[error("divergence at iteration {iteration} step {step}: running mean loss {running_mean:.4} > {threshold:.4}")]
    Divergence {
        iteration: usize,
        step: usize,
        running_mean: f64,
        threshold: f64,
    },

    /// Malformed tensor file or checkpoint.
    #[error("tensor file: {0}")]
    TensorFile(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn ingest(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Ingest {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code the CLI maps this error onto.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            Error::Io(_) => 4,
            _ => 2,
        }
    }
}
