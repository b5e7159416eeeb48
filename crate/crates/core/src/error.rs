use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::Frame;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {index} lies behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    #[error("invalid depth {z} at pixel {index}")]
    InvalidDepth { index: usize, z: f64 },

    #[error("frame mismatch: expected {expected}, found {found}")]
    FrameMismatch { expected: Frame, found: Frame },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),

    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(String),

    #[error("invalid rigid transform: {0}")]
    Transform(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("expected a rank-{expected} tensor, found shape {found:?}")]
    Rank { expected: usize, found: Vec<usize> },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("could not place {count} objects without overlap after {attempts} attempts")]
    Placement { count: usize, attempts: usize },

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("object {0} is not visible in any view")]
    Coverage(u32),

    #[error("crop window does not intersect the image")]
    Crop,

    #[error("unknown instance id {0}")]
    UnknownInstance(u32),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("constraint `{reason}` rejected every candidate after {attempts} draws")]
    Infeasible { reason: String, attempts: usize },

    #[error("scorer returned a non-finite value {0}")]
    Scorer(f64),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Coarse category used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config { .. } => "validation",
            Error::MissingArtifact(_) | Error::Io(_) => "path",
            Error::Format { .. } | Error::Json(_) => "format",
            Error::Data(_) | Error::Coverage(_) | Error::EmptyInput(_) => "data",
            Error::Divergence { .. } => "training",
            _ => "runtime",
        }
    }
}
