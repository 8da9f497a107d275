//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("model manifest: {0}")]
    Manifest(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("idx dataset: {0}")]
    Idx(String),

    #[error("quantization: {0}")]
    Quantize(String),

    #[error("mapping: {0}")]
    Mapping(String),

    #[error("device model: {0}")]
    Device(String),

    #[error("adc: {0}")]
    Adc(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("analysis: {0}")]
    Analysis(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by an invalid experiment configuration
    /// (the CLI maps these to exit code 2; everything else is exit code 1).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
