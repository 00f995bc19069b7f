use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty datastore")]
    EmptyDatastore,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidTokenId { id: u32, size: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{what} fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("corrupt file {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("non-finite loss {loss} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, loss: f64 },
}

impl Error {
    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }

    /// Errors caused by the caller's configuration rather than by a failure
    /// while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidParam(_)
                | Error::UnknownStrategy { .. }
                | Error::FingerprintMismatch { .. }
                | Error::DimensionMismatch { .. }
        )
    }
}
