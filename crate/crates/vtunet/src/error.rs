use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("{op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("{op}: row index {index} out of range for {rows} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        rows: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{path}: format error: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Single-word category used for machine-parseable CLI failure lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::NonFinite { .. } => "numeric",
            Error::Numeric { .. } => "numeric",
            Error::IndexOutOfRange { .. } => "index",
            Error::Config(_) => "config",
            Error::Geometry(_) => "geometry",
            Error::Tape(_) => "tape",
            Error::UndefinedMetric(_) => "metric",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
