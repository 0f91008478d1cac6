use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("band {band} missing from {group} group")]
    MissingBand { group: String, band: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt raster {path}: {reason}")]
    CorruptRaster { path: PathBuf, reason: String },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported resampling factor {0} (expected 2 or 6)")]
    BadFactor(usize),

    #[error("dimension {dim} is not divisible by factor {factor}")]
    ShapeNotDivisible { dim: usize, factor: usize },

    #[error("scene {scene_id} has no 60 m band group, required for x6")]
    MissingLr60 { scene_id: String },

    #[error("patch size {patch} invalid: {reason}")]
    PatchTooLarge { patch: usize, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("value outside the probability domain [0, 1]: {0}")]
    DomainError(f64),

    #[error("reference band is all zero")]
    ZeroReference,

    #[error("every pixel has a degenerate spectral vector")]
    AllPixelsDegenerate,

    #[error("window {window} larger than image {rows}x{cols}")]
    WindowTooLarge {
        window: usize,
        rows: usize,
        cols: usize,
    },

    #[error("parameters contain non-finite values ({0})")]
    UntrainedParams(String),

    #[error("non-finite loss at step {step}: {what}")]
    NonFiniteLoss { step: u64, what: String },

    #[error("no training data: {0}")]
    DataExhausted(String),

    #[error("version mismatch in {path}: {found}")]
    VersionMismatch { path: PathBuf, found: String },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable machine-readable code, used by the CLI and the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingBand { .. } => "MissingBand",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::CorruptRaster { .. } => "CorruptRaster",
            Error::CorruptCheckpoint { .. } => "CorruptCheckpoint",
            Error::Io { .. } => "IoFailure",
            Error::BadFactor(_) => "BadFactor",
            Error::ShapeNotDivisible { .. } => "ShapeNotDivisible",
            Error::MissingLr60 { .. } => "MissingLr60",
            Error::PatchTooLarge { .. } => "PatchTooLarge",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::DomainError(_) => "DomainError",
            Error::ZeroReference => "ZeroReference",
            Error::AllPixelsDegenerate => "AllPixelsDegenerate",
            Error::WindowTooLarge { .. } => "WindowTooLarge",
            Error::UntrainedParams(_) => "UntrainedParams",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::DataExhausted(_) => "DataExhausted",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::Json { .. } => "JsonError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptRaster {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
