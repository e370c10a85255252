use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad-magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("trailing-bytes: {0} unexpected bytes after payload")]
    TrailingBytes(usize),

    #[error("size-overflow: declared dimensions {0:?} do not fit in memory")]
    SizeOverflow(Vec<u64>),

    #[error("unsupported-version: {0}")]
    UnsupportedVersion(u32),

    #[error("schema: {0}")]
    Schema(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        FormatError::Schema(msg.into())
    }
}
