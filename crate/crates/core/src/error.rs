use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch { expected: [usize; 3], actual: [usize; 3] },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("singular affine transform (|det| = {det:e})")]
    SingularTransform { det: f64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("zero-variance data: {0}")]
    ZeroVariance(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("{path}: bad magic {found:?}, expected \"XV3D\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is numeric (degenerate data, non-finite values)
    /// rather than an I/O or configuration problem.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::SingularTransform { .. }
                | Error::UndefinedCorrelation(_)
                | Error::ZeroVariance(_)
                | Error::DegenerateSplit(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Json { .. }
                | Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::UnsupportedVersion { .. }
        )
    }
}
