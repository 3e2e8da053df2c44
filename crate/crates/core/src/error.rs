use std::io;

/// Errors raised anywhere in the training engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Operand has the wrong number of axes.
    #[error("rank error: {0}")]
    Rank(String),

    /// A scalar argument is out of its valid range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An operation was called in the wrong lifecycle state (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// A file does not follow its binary format.
    #[error("format error: {0}")]
    Format(String),

    /// Two inputs that must agree with each other do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A configuration key is missing or malformed.
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    /// Training produced a non-finite value.
    #[error("numerical failure in layer {layer}: {msg}")]
    Numerical { layer: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Argument(_) => 1,
            Error::Format(_) | Error::Consistency(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Numerical { .. } => 3,
            Error::Dimension(_) | Error::Rank(_) | Error::State(_) => 1,
        }
    }
}
