use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point count mismatch: {src} source vs {dst} destination")]
    SizeMismatch { src: usize, dst: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask selects no points")]
    EmptyMask,

    #[error("too few points: need at least {min}, got {actual}")]
    TooFewPoints { min: usize, actual: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("unknown ensemble mode `{0}`")]
    UnknownEnsemble(String),

    #[error("ensemble mode not applicable: {0}")]
    EnsembleLevel(&'static str),

    #[error("frame is missing {0}")]
    MissingGroundTruth(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid stream file: {0}")]
    InvalidStream(String),

    #[error("invalid checkpoint file: {0}")]
    InvalidCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
