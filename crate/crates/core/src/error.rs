use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameters, shapes that do not fit together, bad options.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A kernel produced NaN or infinity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training aborted because the loss stopped being finite.
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {learning_rate})")]
    Divergence {
        epoch: usize,
        batch: usize,
        learning_rate: f64,
    },

    /// Problem with the content of a dataset file.
    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A pipeline step ran before the step producing its input.
    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not found: {0}")]
    NotFound(String),
}

impl Error {
    /// Stable short identifier used in machine-readable CLI output and API errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Divergence { .. } => "divergence",
            Error::Data { .. } => "data",
            Error::Format { .. } => "format",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Io { .. } => "io",
            Error::NotFound(_) => "not_found",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
