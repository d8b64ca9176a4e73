use std::path::PathBuf;

/// Failures of a run, split by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    /// Unreadable, malformed or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Library(#[from] diffblend::Error),
    #[error("{0}")]
    Runtime(String),
}

impl RunError {
    /// `1` for configuration problems, `2` for everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn config(e: impl std::fmt::Display) -> Self {
        RunError::Config(e.to_string())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RunError::Io { path: path.into(), source }
    }
}

pub type RunResult<T> = std::result::Result<T, RunError>;
