use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {layer} has zero l1 mass and cannot be link-normalized")]
    ZeroMass { layer: usize },

    #[error("reference signal has zero Frobenius norm")]
    ZeroReference,

    #[error("negative entry {value} at ({row}, {col}) in a ReLU target")]
    NegativeTarget { row: usize, col: usize, value: f64 },

    #[error("problem is infeasible: {0}")]
    Infeasible(String),

    #[error("original weights of layer {layer} violate the slacked constraint set (excess {excess:e})")]
    FeasibilityAssertion { layer: usize, excess: f64 },

    #[error("oracle limit exceeded: {0}")]
    OracleLimit(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("model file {path}: {reason}")]
    ModelFile { path: PathBuf, reason: String },

    #[error("layer {layer} ({file}): expected {expected} bytes, found {found}")]
    SizeMismatch {
        layer: usize,
        file: String,
        expected: u64,
        found: u64,
    },

    #[error("unsupported manifest format version {0}")]
    UnknownVersion(u32),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
