//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input bytes could not be decoded to any UTF-8 text.
    #[error("input is not decodable as UTF-8 text")]
    InvalidEncoding,

    /// The document source contains no element nodes.
    #[error("document contains no element nodes")]
    EmptyDocument,

    /// Tensor or weight shapes disagree with the configuration.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A node sequence is longer than the configured maximum chunk length.
    #[error("sequence of {len} nodes exceeds maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// Paired inputs have different lengths.
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    /// Prediction and gold maps cover different node ids.
    #[error("prediction and gold node-id sets differ")]
    KeyMismatch,

    /// A checkpoint file is truncated or structurally invalid.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// A checkpoint was written by an unsupported format version.
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    /// Training was asked to run on an empty corpus.
    #[error("corpus contains no documents")]
    EmptyCorpus,

    /// The training loss became NaN or infinite.
    #[error("non-finite loss at optimization step {step}")]
    NonFiniteLoss { step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
