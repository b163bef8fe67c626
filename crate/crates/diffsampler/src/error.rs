use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or incompatible option combination.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor / layer shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A tape was consumed by backward() and used again.
    #[error("tape already consumed by backward()")]
    TapeConsumed,

    /// Non-finite value where a finite one is required.
    #[error("non-finite value: {context} at state {state:?}")]
    NonFinite { context: String, state: Vec<f64> },

    /// Draw from an empty buffer.
    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint integrity failure (truncation, corruption, wrong magic).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
