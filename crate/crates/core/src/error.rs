use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum FedError {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation received inputs outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Local training produced a non-finite loss.
    #[error("numeric divergence in client {client} at round {round}: {detail}")]
    Divergence {
        round: usize,
        client: usize,
        detail: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl FedError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FedError::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        FedError::Domain(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            FedError::Config(_) | FedError::Domain(_) => 2,
            FedError::Divergence { .. } => 3,
            FedError::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, FedError>;
