//! Error types shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input failed a basic validity check (non-finite entries, bad shape, bad rotation, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Cloud shapes or space tags do not match between arguments.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The configuration lies in the degenerate set where the group orbit collapses
    /// (collinear cloud for SO(3), origin for SO(2)); projection and curvature are undefined there.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// A scalar argument is outside its documented range.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// A Monte-Carlo estimate has too little effective data to be trusted.
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Configuration file problems (unknown keys, missing fields, parse errors).
    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
