use thiserror::Error;

use crate::config::ConfigError;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] kem_core::Error),
    #[error(transparent)]
    Synth(#[from] kem_synth::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    /// A correctness gate failed (cost mismatch, gradient check).
    #[error("correctness gate failed: {0}")]
    Gate(String),
}

impl HarnessError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        HarnessError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 1 for configuration problems, 2 for failed
    /// correctness gates, 3 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Gate(_) => 2,
            _ => 3,
        }
    }
}
