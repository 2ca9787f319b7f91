use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Structural problems in a taxonomy declaration. Every offending item is listed.
    #[error("invalid taxonomy: {}", .0.join("; "))]
    Taxonomy(Vec<String>),

    #[error("class index {index} is not valid here: {reason}")]
    Class { index: u16, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss component `{component}` at iteration {iteration}")]
    NonFinite { component: &'static str, iteration: u64 },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("refusing to overwrite existing path {0} (pass --overwrite)")]
    Exists(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }

    /// Validation errors (bad inputs, including malformed JSON files) as
    /// opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Taxonomy(_)
                | Error::Class { .. }
                | Error::Shape(_)
                | Error::InvalidArgument(_)
                | Error::CheckpointVersion { .. }
                | Error::Exists(_)
                | Error::Json { .. }
        )
    }
}
