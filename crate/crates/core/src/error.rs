use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse config: {0}")]
    ConfigParse(String),

    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("insufficient frames: need index {needed} but source has {available}")]
    InsufficientFrames { needed: usize, available: usize },

    #[error("missing depth prior for frame {0}")]
    MissingDepth(usize),

    #[error("frame {height}x{width} is smaller than the {required}x{required} crop window")]
    FrameTooSmall {
        height: usize,
        width: usize,
        required: usize,
    },

    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    IndivisibleDims {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("zero-norm patch embedding at row {0}")]
    ZeroNormEmbedding(usize),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("channel mismatch: decoder expects {expected} input channels, got {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("checkpoint fingerprint does not match the configured architecture")]
    FingerprintMismatch,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at iteration {iteration}: {components}")]
    NonFiniteLoss { iteration: u64, components: String },

    #[error("malformed metrics file: {0}")]
    Metrics(String),

    #[error("no data")]
    NoData,

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid_config(field: &str, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
