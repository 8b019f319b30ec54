use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("batch size {0} is not divisible by 4")]
    BatchSize(i64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range [0, {bound})")]
    LabelRange { label: i64, bound: i64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("unknown block {name:?}; valid blocks are {valid:?}")]
    UnknownBlock { name: String, valid: Vec<String> },

    #[error("pixel range [{min}, {max}] does not match the [-1, 1] convention")]
    PixelRange { min: f64, max: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing dataset files under {root}: expected {expected:?}")]
    MissingFiles { root: PathBuf, expected: Vec<String> },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Torch(#[from] tch::TchError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
