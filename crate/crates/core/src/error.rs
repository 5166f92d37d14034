use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),

    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("failed to encode image {path}: {message}")]
    Encode { path: PathBuf, message: String },

    #[error("corpus at {0} contains no decodable images")]
    EmptyCorpus(PathBuf),

    #[error("manifest {path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("cannot form {k} clusters from {distinct} distinct ratio values")]
    TooFewDistinct { k: usize, distinct: usize },

    #[error("resized width {width} for aspect ratio {ratio} is below the 16 pixel minimum")]
    WidthTooSmall { ratio: f64, width: u32 },

    #[error("image {dimension} {actual} is smaller than patch size {patch}")]
    ImageTooSmall {
        dimension: &'static str,
        actual: usize,
        patch: usize,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("feature dimensions differ: {0:?}")]
    DimensionMismatch(Vec<usize>),

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("no query has a valid relevant gallery entry ({skipped} skipped)")]
    NoValidQueries { skipped: usize },

    #[error("invalid format in {context}: {message}")]
    Format { context: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image id sets differ across stores; first missing ids: {0:?}")]
    IdMismatch(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True when the failure is caused by caller input (bad paths, files or
    /// arguments) rather than a defect in the pipeline itself.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::NonFinite(_))
    }
}
