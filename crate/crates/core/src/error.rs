use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("degenerate batch: batch norm in train mode needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("naming error: {0}")]
    Naming(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("query {query} has no valid gallery entries after exclusion")]
    NoValidGallery { query: usize },

    #[error("cannot parse file name {0:?}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("unsupported format version: {found}")]
    Version { found: String },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("malformed data: {0}")]
    Malformed(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for errors caused by the input data rather than by usage or configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse(_)
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::Version { .. }
                | Error::Truncated(_)
                | Error::UnknownParameter(_)
                | Error::Malformed(_)
                | Error::NoValidGallery { .. }
                | Error::Dimension(_)
        )
    }
}
