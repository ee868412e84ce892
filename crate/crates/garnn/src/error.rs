//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("dimension mismatch in {op}: left shape {left:?}, right shape {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A softmax row has no support entries at all.
    #[error("isolated vertex: row {row} has empty support")]
    IsolatedVertex { row: usize },

    /// A caller violated an operation contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Inconsistent or invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A data file failed to parse.
    #[error("ingestion error at {path}:{line}: {msg}")]
    Ingestion {
        path: String,
        line: usize,
        msg: String,
    },

    /// A loss batch contained no valid entries.
    #[error("degenerate batch: no valid entries under the mask")]
    DegenerateBatch,

    /// A non-finite value surfaced during training.
    #[error("non-finite value in {what}: training aborted")]
    NonFinite { what: String },

    /// Checkpoint format or compatibility problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
