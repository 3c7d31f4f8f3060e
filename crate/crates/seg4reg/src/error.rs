use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("state error: {0}")]
    State(String),
    #[error("parameter set '{0}' is frozen and cannot be updated")]
    Frozen(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code contract: 2 input error, 3 divergence, 4 state/dependency error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            Error::State(_) | Error::Frozen(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
