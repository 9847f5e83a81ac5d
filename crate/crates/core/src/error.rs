use std::path::PathBuf;

/// Errors produced by the segmentation toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("element count mismatch: header declares {expected} elements, payload holds {found}")]
    ElementCountMismatch { expected: usize, found: usize },

    #[error("unsupported element type: {0}")]
    UnsupportedElementType(String),

    #[error("invalid spacing {0:?}: every component must be finite and > 0")]
    InvalidSpacing([f64; 3]),

    #[error("invalid dimensions {0:?}: every component must be > 0")]
    InvalidDims([usize; 3]),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bounding box {lo:?}..={hi:?} does not fit inside dims {dims:?}")]
    BoxOutOfRange {
        lo: [usize; 3],
        hi: [usize; 3],
        dims: [usize; 3],
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid probability volume: {0}")]
    InvalidProbabilities(String),

    #[error("class {0} is absent from every label volume")]
    AbsentClass(usize),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("no liver found: liver probability never reaches the threshold")]
    NoLiverFound,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
