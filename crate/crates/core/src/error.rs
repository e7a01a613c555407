use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} out of range: {value}")]
    Range { what: &'static str, value: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("format error in {path}: {msg} (byte offset {offset})")]
    Format { path: PathBuf, offset: u64, msg: String },

    /// `line` is 1-based; 0 when the problem is not tied to one line.
    #[error("config error{}: {msg}", at_line(*line))]
    Config { line: usize, msg: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("no classes evaluated")]
    NoClasses,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }
}

fn at_line(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!(" at line {line}")
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
