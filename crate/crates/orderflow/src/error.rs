//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration file or option is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// The request is valid but outside what this build can compute
    /// (for example enumerating a state space above the cap).
    #[error("capability error: {0}")]
    Capability(String),

    /// Checkpoint does not match the environment or model it is loaded into.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// Training produced non-finite values and was aborted.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn capability(msg: impl Into<String>) -> Self {
        Error::Capability(msg.into())
    }
}
