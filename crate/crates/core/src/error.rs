//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes are incompatible.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// `backward` was called on a non-scalar tensor.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// An optimizer step found a parameter without a gradient.
    #[error("parameter `{name}` has no gradient; run backward() first")]
    MissingGrad { name: String },

    /// A cell CSV failed to parse. `row` is the 1-based data row (0 for
    /// header-level problems).
    #[error("{path}: row {row}: {message}")]
    CsvParse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    /// A cell is too short to produce a single window.
    #[error("cell `{cell_id}` has {eol} cycles, fewer than the window size {n_w}")]
    CellTooShort {
        cell_id: String,
        eol: usize,
        n_w: usize,
    },

    /// A precondition on an argument was violated.
    #[error("{0}")]
    InvalidArgument(String),

    /// Training cannot proceed (empty or single-class label set, no
    /// post-FPC windows, divergence).
    #[error("training failed: {0}")]
    Training(String),

    /// A checkpoint file does not match the expected schema or model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
