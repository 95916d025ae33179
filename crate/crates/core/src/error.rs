use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("dimension error: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("degenerate plot: {0}")]
    DegeneratePlot(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable code, printed by the CLI on the diagnostic stream.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Format(_) => "E_FORMAT",
            Error::Row { .. } => "E_ROW",
            Error::Data(_) => "E_DATA",
            Error::Config(_) => "E_CONFIG",
            Error::Usage(_) => "E_USAGE",
            Error::Numeric(_) => "E_NUMERIC",
            Error::Capacity(_) => "E_CAPACITY",
            Error::Dimension { .. } => "E_DIMENSION",
            Error::DegeneratePlot(_) => "E_PLOT",
            Error::Io { .. } => "E_IO",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
