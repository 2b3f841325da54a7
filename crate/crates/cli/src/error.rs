use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable, unparsable or invalid scenario input.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("run diverged at t = {t}: {detail}")]
    Divergence { t: f64, detail: String },

    /// The run completed but an enabled check failed.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] hypbstep_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence { .. } => 3,
            CliError::Verification(_) => 4,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type CliResult<T> = Result<T, CliError>;
