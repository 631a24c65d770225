use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("query has no positives")]
    UndefinedQuery,

    #[error("{}format error at byte {offset}: {message}", file_prefix(.path))]
    Format {
        path: Option<PathBuf>,
        offset: u64,
        message: String,
    },

    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            offset,
            message: message.into(),
        }
    }

    /// Attaches the file a format error was read from.
    pub(crate) fn in_file(self, file: &std::path::Path) -> Self {
        match self {
            Error::Format {
                path: None,
                offset,
                message,
            } => Error::Format {
                path: Some(file.to_path_buf()),
                offset,
                message,
            },
            other => other,
        }
    }

    /// True when the error stems from bad input data or files rather than
    /// from a misconfigured invocation.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}

fn file_prefix(path: &Option<PathBuf>) -> String {
    path.as_ref()
        .map(|p| format!("{}: ", p.display()))
        .unwrap_or_default()
}

pub type Result<T> = std::result::Result<T, Error>;
