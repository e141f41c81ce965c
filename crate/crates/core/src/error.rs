use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: String,
        expected: String,
        got: String,
    },

    #[error("input {height}x{width} must be resized: dimensions must be divisible by {factor}")]
    ResizeRequired {
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite loss term `{term}` ({value})")]
    NonFinite { term: &'static str, value: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing frame {path}")]
    MissingFrame { path: PathBuf },

    #[error("unknown sequence `{0}`")]
    UnknownSequence(String),

    #[error("training diverged at iteration {iteration}: non-finite `{term}`; last good checkpoint: {}", .checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    Diverged {
        iteration: u64,
        term: &'static str,
        checkpoint: Option<PathBuf>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            dim: dim.into(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
