use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: duplicate id `{id}`")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("invalid value: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("unsupported backend: {0}")]
    UnsupportedBackend(String),

    #[error("unknown policy context {0}")]
    UnknownContext(String),

    #[error("action `{action}` is not in the vocabulary of context {context}")]
    UnknownAction { context: String, action: String },

    #[error("reward `{reward}` requires {missing}")]
    MissingRewardInput {
        reward: &'static str,
        missing: &'static str,
    },

    #[error("not enough instances: {0}")]
    InsufficientData(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure stems from configuration rather than execution.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Validation(_)
                | Error::Parse { .. }
                | Error::DuplicateId { .. }
                | Error::UnsupportedBackend(_)
                | Error::InsufficientData(_)
                | Error::Io { .. }
        )
    }
}

/// A remote backend (LLM endpoint or retriever) failed.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{endpoint}: {kind} after {attempts} attempt(s)")]
pub struct BackendError {
    pub endpoint: String,
    pub kind: BackendErrorKind,
    /// Total attempts made, including the first.
    pub attempts: u32,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendErrorKind {
    #[error("transport failure ({0})")]
    Transport(String),
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("malformed response ({0})")]
    Malformed(String),
}

impl BackendErrorKind {
    /// Transport errors, 429 and 5xx are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendErrorKind::Transport(_) => true,
            BackendErrorKind::Status(code) => *code == 429 || *code >= 500,
            BackendErrorKind::Malformed(_) => false,
        }
    }
}
