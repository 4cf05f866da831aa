use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing prerequisite {path}: run `{stage}` first")]
    Missing { path: PathBuf, stage: &'static str },

    #[error(transparent)]
    Core(#[from] xai3d_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 ok, 1 I/O, 2 configuration, 3 missing prerequisite, 4 numeric or
    /// data failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Io { .. } => 1,
            CliError::Core(e) if e.is_io() => 1,
            CliError::Core(_) => 4,
        }
    }
}
