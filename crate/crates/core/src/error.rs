use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OtsmError>;

#[derive(Debug, Error)]
pub enum OtsmError {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("partition mismatch between operands")]
    PartitionMismatch,

    #[error("eigensolver did not converge on a {0}x{0} matrix")]
    EigenFailure(usize),

    #[error("singular value decomposition did not converge on a {0}x{1} matrix")]
    SvdFailure(usize, usize),

    #[error("frame is not orthonormal (residual {residual:.3e})")]
    NotOrthonormal { residual: f64 },

    #[error("diagonal block {0} of the noise matrix is nonzero")]
    NonzeroDiagonalBlock(usize),

    #[error("point is not stationary: residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    NonStationary { residual: f64, tol: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed instance file: {0}")]
    Format(String),

    #[error("unsupported format version {major}.{minor}")]
    UnsupportedVersion { major: u16, minor: u16 },

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl OtsmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OtsmError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        OtsmError::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
