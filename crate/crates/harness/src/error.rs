//! Harness failures and their exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Engine(#[from] frictionlab::Error),

    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl HarnessError {
    /// 1 for output failures, 4 for engine refusals, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Io { .. } => 1,
            HarnessError::Engine(e) if e.is_refusal() => 4,
            HarnessError::Engine(frictionlab::Error::Io(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Exit code for a run whose checks did not hold.
pub const EXIT_BREACH: i32 = 3;
