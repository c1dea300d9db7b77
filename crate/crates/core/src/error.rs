use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the transport engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scene error at `{path}`: {message}")]
    Scene { path: String, message: String },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("dense solve of {unknowns} unknowns per channel exceeds the guard of {limit}")]
    SizeGuard { unknowns: usize, limit: usize },

    #[error("transport system does not converge (spectral radius estimate {0:.6})")]
    NonConvergent(f64),

    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn scene(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Scene {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
