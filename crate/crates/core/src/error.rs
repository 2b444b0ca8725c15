use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cell {cell} has label {label}, outside 1..={n_types}")]
    LabelOutOfRange {
        cell: usize,
        label: usize,
        n_types: usize,
    },

    #[error("{what} column {column} has zero depth (all counts are zero)")]
    ZeroDepth { what: &'static str, column: usize },

    #[error(
        "invalid count {value} at row {row}, column {column}: counts must be non-negative integers"
    )]
    InvalidCount {
        row: usize,
        column: usize,
        value: f64,
    },

    #[error("cell type {0} has no cells")]
    EmptyCellType(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("inconsistent dropout state at gene {gene}, cell {cell}: S = 0 with a positive count")]
    InconsistentDropout { gene: usize, cell: usize },

    #[error("infeasible projection: floor {floor} times length {len} exceeds 1")]
    InfeasibleProjection { floor: f64, len: usize },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("operation requires bulk data, but the fit has none")]
    NoBulkData,

    #[error("parse error in {path}: line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
