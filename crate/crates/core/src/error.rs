use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("sequence length {len} exceeds capacity {max}")]
    Capacity { len: usize, max: usize },

    #[error("index {index} out of range for {what} of size {size}")]
    Index { what: &'static str, index: usize, size: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
