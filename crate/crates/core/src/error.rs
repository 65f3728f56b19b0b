use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("length mismatch in {op}: {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("non-finite value in input to {0}")]
    NonFiniteInput(&'static str),

    #[error("invalid matrix dimensions {rows}x{cols}")]
    InvalidDimensions { rows: usize, cols: usize },

    #[error("SVD of {rows}x{cols} matrix did not converge within {sweeps} sweeps")]
    IterativeNonConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },

    #[error("slice [{start}, {start}+{rank}) out of range for k = {k}")]
    SliceOutOfRange { start: usize, rank: usize, k: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{what} = {value} outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("importance profile is degenerate: no component ablation changes accuracy")]
    DegenerateProfile,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("bad magic in {path}: expected {expected:02x?}, found {found:02x?}")]
    BadMagic {
        path: PathBuf,
        expected: Vec<u8>,
        found: Vec<u8>,
    },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path} has {extra} unexpected trailing bytes")]
    TrailingBytes { path: PathBuf, extra: u64 },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
