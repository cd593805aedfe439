use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{}reference current {current:e} A exceeds LUT range (max {max:e} A); rebuild the LUT wider", column.map(|c| format!("column {c}: ")).unwrap_or_default())]
    Range {
        column: Option<usize>,
        current: f64,
        max: f64,
    },

    #[error("numeric failure: {message} (residual {residual:e})")]
    Numeric { message: String, residual: f64 },

    #[error("invalid state: {0}")]
    State(String),

    #[error("extraction failed: {0}")]
    Extraction(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("{path}: format error at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("report merge failed: {0}")]
    Merge(String),

    #[error("acceptance check failed: {0}")]
    Check(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Format { .. } | Error::Io { .. } | Error::Merge(_) | Error::State(_) => 3,
            Error::Check(_) => 5,
            Error::Argument(_)
            | Error::Range { .. }
            | Error::Numeric { .. }
            | Error::Extraction(_)
            | Error::Metric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Range { .. } => "range",
            Error::Numeric { .. } => "numeric",
            Error::State(_) => "state",
            Error::Extraction(_) => "extraction",
            Error::Metric(_) => "metric",
            Error::Format { .. } => "format",
            Error::Config { .. } => "config",
            Error::Merge(_) => "merge",
            Error::Check(_) => "check",
            Error::Io { .. } => "io",
        }
    }
}
