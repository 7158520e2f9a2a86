use std::path::PathBuf;

use thiserror::Error;

use crate::data_model::Split;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("invalid clip: {0}")]
    InvalidClip(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("clip of {0} frames is too short, need at least 3")]
    ClipTooShort(usize),

    #[error("empty sequence")]
    EmptySequence,

    #[error("running variance must be strictly positive (feature {0})")]
    NonPositiveVariance(usize),

    #[error("FAKE clip from '{0}' passed to real-only predictor training")]
    LabelLeak(String),

    #[error("frame predictor is not frozen")]
    PredictorNotFrozen,

    #[error("unknown severity {severity} for {operation}")]
    UnknownSeverity { operation: String, severity: u8 },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("video {0} has zero frames")]
    EmptyVideo(PathBuf),

    #[error("transcoder unavailable: {0}")]
    TranscoderUnavailable(String),

    #[error("transcode of {path} failed ({status}): {stderr}")]
    TranscodeFailed {
        path: PathBuf,
        status: String,
        stderr: String,
    },

    #[error("manifest has no {0} records")]
    MissingSplit(Split),

    #[error("frozen component missing: {0}")]
    FrozenComponentMissing(String),

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("robustness report needs clean (undegraded) baseline records")]
    MissingBaseline,

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable name for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidFrame(_) => "InvalidFrame",
            Error::InvalidClip(_) => "InvalidClip",
            Error::Precondition(_) => "Precondition",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::DimensionMismatch(..) => "DimensionMismatch",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::ClipTooShort(_) => "ClipTooShort",
            Error::EmptySequence => "EmptySequence",
            Error::NonPositiveVariance(_) => "NonPositiveVariance",
            Error::LabelLeak(_) => "LabelLeakError",
            Error::PredictorNotFrozen => "PredictorNotFrozen",
            Error::UnknownSeverity { .. } => "UnknownSeverity",
            Error::Decode { .. } => "DecodeError",
            Error::EmptyVideo(_) => "EmptyVideo",
            Error::TranscoderUnavailable(_) => "TranscoderUnavailable",
            Error::TranscodeFailed { .. } => "TranscodeFailed",
            Error::MissingSplit(_) => "MissingSplit",
            Error::FrozenComponentMissing(_) => "FrozenComponentMissing",
            Error::EmptyEvalSet => "EmptyEvalSet",
            Error::MissingBaseline => "MissingBaseline",
            Error::Manifest(_) => "ManifestError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
            Error::Image(_) => "ImageError",
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
