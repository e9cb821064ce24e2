use std::path::Path;

use thiserror::Error;

/// CLI failure modes, each mapped to a stable exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags or argument values (exit 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// Filesystem or decode/encode failure (exit 3).
    #[error("i/o error: {0}")]
    Io(String),
    /// Numeric failure inside a computation (exit 4).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Corrupted or mismatched binary payload (exit 5).
    #[error("integrity error: {0}")]
    Integrity(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Integrity(_) => 5,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<sepconv_core::Error> for CliError {
    fn from(e: sepconv_core::Error) -> Self {
        match e {
            sepconv_core::Error::Parameter(m) => CliError::Config(m),
            sepconv_core::Error::Numeric(m) => CliError::Numeric(m),
            sepconv_core::Error::State(m) => CliError::Numeric(format!("internal state: {m}")),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Tracks files created by a command so they can be removed if it fails
/// part-way.
#[derive(Default)]
pub struct OutputGuard {
    created: Vec<std::path::PathBuf>,
    keep: bool,
}

impl OutputGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, path: impl Into<std::path::PathBuf>) {
        self.created.push(path.into());
    }

    /// Call when the command succeeded; outputs are kept.
    pub fn commit(&mut self) {
        self.keep = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.keep {
            for path in &self.created {
                let _ = std::fs::remove_file(path);
            }
        }
    }
}
