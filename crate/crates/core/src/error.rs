use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a 0-dimensional loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value at element {index} of input {input}")]
    NonFiniteInput { input: usize, index: usize },

    #[error("non-finite {term} loss")]
    NonFiniteLoss { term: &'static str },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("rank {0} exceeds the maximum of 8")]
    RankTooLarge(usize),

    #[error("checkpoint format version {found}, this build reads version {expected}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("config mismatch on `{key}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch {
        key: String,
        expected: String,
        found: String,
    },

    #[error("config line {line}: unknown key `{key}`")]
    UnknownConfigKey { key: String, line: usize },

    #[error("config line {line}: bad value for `{key}`: {msg}")]
    BadConfigValue {
        key: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::NonFiniteInput { .. } => "non_finite_input",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::RankTooLarge(_) => "rank_too_large",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::MissingTensor(_) => "missing_tensor",
            Error::ConfigMismatch { .. } => "config_mismatch",
            Error::UnknownConfigKey { .. } => "unknown_config_key",
            Error::BadConfigValue { .. } => "bad_config_value",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
