use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared across the engine.
///
/// The variants map onto the distinct CLI exit codes: config errors,
/// data/format errors, and state (stage-ordering) errors each carry their
/// own code so scripts can tell them apart.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or extent mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid argument value (empty input, out-of-range rank, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Operation invoked in the wrong state (uncalibrated quantizer,
    /// double backward, stage run out of order, ...).
    #[error("state error: {0}")]
    State(String),

    /// Invalid configuration (unknown layer kind, unsupported bit width).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or corrupted on-disk data.
    #[error("format error: {0}")]
    Format(String),

    /// Internal invariant violated (out-of-range integer tensor, ...).
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl fmt::Display) -> Self {
        Error::Dimension(msg.to_string())
    }
    pub fn arg(msg: impl fmt::Display) -> Self {
        Error::Argument(msg.to_string())
    }
    pub fn state(msg: impl fmt::Display) -> Self {
        Error::State(msg.to_string())
    }
    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }
    pub fn format(msg: impl fmt::Display) -> Self {
        Error::Format(msg.to_string())
    }

    /// Process exit code for the CLI. Documented in the README.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Format(_) | Error::Io(_) => 3,
            Error::State(_) => 4,
            Error::Dimension(_) | Error::Invariant(_) => 5,
        }
    }
}
