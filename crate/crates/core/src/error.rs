use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value in {location}")]
    Numeric { location: String },

    #[error("cannot merge statistics: {0}")]
    Merge(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("incompatible inputs: {0}")]
    Compatibility(String),

    #[error("malformed {kind} file: {message}")]
    Format { kind: &'static str, message: String },

    #[error("verification failed: layer {layer} index ({row}, {col}): {message}")]
    Verification {
        layer: String,
        row: usize,
        col: usize,
        message: String,
    },

    #[error("training diverged at step {step}: loss {loss}")]
    Training { step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable identifier for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Parameter(_) => "parameter",
            Error::Numeric { .. } => "numeric",
            Error::Merge(_) => "merge",
            Error::State(_) => "state",
            Error::Compatibility(_) => "compatibility",
            Error::Format { .. } => "format",
            Error::Verification { .. } => "verification",
            Error::Training { .. } => "training",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn numeric(location: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
        }
    }

    pub(crate) fn format(kind: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            kind,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
