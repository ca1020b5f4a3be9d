use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("orchestration error: {0}")]
    Orchestration(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("weight census mismatch: {0}")]
    Census(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 = configuration, 3 = I/O, 4 = numeric; everything else maps to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schedule(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Census(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
