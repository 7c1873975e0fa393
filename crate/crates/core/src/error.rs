use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("degenerate vector: norm below {threshold:e}")]
    DegenerateVector { threshold: f64 },

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("gradient error: {0}")]
    Gradient(String),

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("checksum mismatch in weights blob: expected {expected:08x}, found {found:08x}")]
    Checksum { expected: u32, found: u32 },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("unknown input `{0}`")]
    UnknownInput(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("label {label} has no palette entry")]
    DanglingLabel { label: u32 },

    #[error("unmatched color ({r}, {g}, {b}) at pixel (x={x}, y={y})")]
    UnmatchedColor { x: usize, y: usize, r: u8, g: u8, b: u8 },

    #[error("mixed layers in one mask: `{first}` and `{second}`")]
    MixedLayers { first: String, second: String },

    #[error("unknown vector `{0}`")]
    UnknownVector(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("non-finite loss at step {step}; last finite loss {last_finite_loss:?}")]
    NonFiniteLoss {
        step: usize,
        last_finite_loss: Option<f64>,
    },

    #[error("image codec error: {0}")]
    Image(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
