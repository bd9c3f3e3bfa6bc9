use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A masked softmax row had no unmasked position.
    #[error("softmax row {row} is fully masked")]
    DegenerateMask { row: usize },

    #[error("backward requires a scalar root, got shape {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("oracle selection requires a reference translation")]
    MissingReference,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
