use thiserror::Error;

use crate::predictor::NernPredictor;

/// Errors raised anywhere in the NeRN pipeline.
#[derive(Debug, Error)]
pub enum NernError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("similarity profile is degenerate (all values equal)")]
    DegenerateProfile,

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("training diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        last_good: Box<NernPredictor>,
    },

    #[error("original network training diverged at epoch {0}")]
    OriginalDiverged(usize),

    #[error("predictor calibration failed: {0}")]
    Calibration(String),

    #[error("coordinate sample is empty")]
    EmptySample,

    #[error("sample of {requested} exceeds population of {population}")]
    SampleTooLarge { requested: usize, population: usize },

    #[error("grid {rows}x{cols} needs {needed} kernels but only {available} are available")]
    GridOverflow {
        rows: usize,
        cols: usize,
        needed: usize,
        available: usize,
    },

    #[error("codec: {0}")]
    Codec(String),

    #[error("config: {0}")]
    Config(String),

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NernError {
    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            NernError::Shape(_) => "shape",
            NernError::InvalidArgument(_) => "invalid_argument",
            NernError::NonScalarLoss(_) => "non_scalar_loss",
            NernError::BackwardTwice => "backward_twice",
            NernError::InvalidDistribution(_) => "invalid_distribution",
            NernError::DegenerateProfile => "degenerate_profile",
            NernError::UnknownArch(_) => "unknown_arch",
            NernError::Diverged { .. } => "diverged",
            NernError::OriginalDiverged(_) => "original_diverged",
            NernError::Calibration(_) => "calibration",
            NernError::EmptySample => "empty_sample",
            NernError::SampleTooLarge { .. } => "sample_too_large",
            NernError::GridOverflow { .. } => "grid_overflow",
            NernError::Codec(_) => "codec",
            NernError::Config(_) => "config",
            NernError::ArtifactMismatch(_) => "artifact_mismatch",
            NernError::Io(_) => "io",
            NernError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, NernError>;
