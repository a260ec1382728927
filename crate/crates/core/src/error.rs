use std::path::PathBuf;

/// Errors produced by the library.
///
/// Variants are grouped so callers (the CLI in particular) can map them to
/// exit codes without string matching.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or channel-count violations in tensor operations.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset problems: missing files, undecodable images, pairing issues.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary file (bad magic, version, truncation, name issues).
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Numeric failures: non-finite loss, failed gradient checks.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Misuse of the autodiff tape (non-scalar loss, reuse after backward).
    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
