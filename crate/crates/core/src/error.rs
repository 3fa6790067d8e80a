use std::path::PathBuf;
use thiserror::Error;

/// Error taxonomy used across the workspace.
///
/// The variants deliberately mirror how callers are expected to react:
/// `Config` means the caller built an invalid request, `Data`/`Format` mean
/// the bytes on disk are wrong, `State` means an operation was called out of
/// order, and `Run` means a numerical run went off the rails (diverged,
/// exceeded its budget).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("state error: {0}")]
    State(String),
    #[error("run error: {0}")]
    Run(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
