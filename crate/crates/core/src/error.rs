use std::fmt;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("codec error in backend {backend}: {message}")]
    Codec { backend: u8, message: String },

    #[error("data corruption: {0}")]
    Corruption(String),

    #[error("unsupported codec id {0}")]
    UnsupportedCodec(u8),

    #[error("format error: {0}")]
    Format(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("pool {pool} has zero capacity")]
    Capacity { pool: PoolLabel },

    #[error("fitting did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Short pool name carried by [`Error::Capacity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolLabel(pub &'static str);

impl fmt::Display for PoolLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code used by the CLI: 2 invalid arguments, 3 data
    /// corruption, 4 convergence failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::NotFound(_)
            | Error::TooLarge(_)
            | Error::Capacity { .. }
            | Error::DegenerateModel(_)
            | Error::Json(_) => 2,
            Error::Corruption(_) | Error::Format(_) | Error::Codec { .. } | Error::UnsupportedCodec(_) => 3,
            Error::Convergence { .. } => 4,
            Error::Internal(_) | Error::Io(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
