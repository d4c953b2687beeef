use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value; the string names the offending field.
    #[error("configuration error: {0}")]
    Config(String),

    /// A precondition of an operation was violated by the caller.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("index ({row}, {col}) out of range for {rows}x{cols} matrix")]
    Index {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("encode error: {0}")]
    Encode(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("run error: {0}")]
    Run(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
