use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    Computation(String),
    #[error("invalid scene structure: {0}")]
    Structure(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code class: 2 for data/format problems, 3 for
    /// numerical failures (usage errors are handled before any of
    /// these are constructed).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Computation(_) | Error::Training(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
