use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or truncated file contents.
    #[error("format error: {0}")]
    Format(String),
    /// Grid or tensor shapes do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Invalid or unsatisfiable configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
