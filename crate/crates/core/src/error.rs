use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("approximator architectures differ")]
    ArchitectureMismatch,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("step called after the episode finished")]
    EpisodeDone,

    #[error("action out of range: {0}")]
    InvalidAction(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
