use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: field `{field}`: {source}")]
    Parse {
        path: PathBuf,
        /// Dotted location of the offending value; `.` for the document root.
        field: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("configs disagree: {0}")]
    Mismatch(String),
    #[error("{path}: unknown column `{column}`")]
    UnknownColumn { path: PathBuf, column: String },
    #[error("{path}:{line}: {message}")]
    BadCsv {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Core(#[from] dgs_core::Error),
}

impl BenchError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        BenchError::Field {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Parse { .. }
            | BenchError::Field { .. }
            | BenchError::Mismatch(_)
            | BenchError::UnknownColumn { .. }
            | BenchError::BadCsv { .. } => 2,
            BenchError::Core(dgs_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}
