use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("schema mismatch for array `{array}`: expected {expected}, found {found}")]
    Schema {
        array: String,
        expected: String,
        found: String,
    },

    #[error("resource unavailable: {0}")]
    Resource(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("bad checkpoint magic: expected \"WRPG\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },
}

impl Error {
    pub fn dim(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the context of a dimension error with a pipeline stage name.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            Error::Dimension {
                context,
                expected,
                actual,
            } => Error::Dimension {
                context: format!("{stage}/{context}"),
                expected,
                actual,
            },
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. }
            | Error::Config(_)
            | Error::Validation(_)
            | Error::Schema { .. }
            | Error::Resource(_) => 2,
            Error::Io { .. }
            | Error::Image { .. }
            | Error::BadMagic(_)
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::Corrupt(_) => 3,
            Error::Divergence { .. } => 4,
        }
    }
}
