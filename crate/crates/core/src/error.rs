use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0} is empty")]
    EmptyInput(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("noise distribution has no mass outside the reserved tokens")]
    DegenerateNoise,

    #[error("could not draw a negative different from id {exclude} after {attempts} attempts")]
    NegativeSampling { exclude: usize, attempts: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("position {position} out of range 1..={len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("vocabulary fingerprint mismatch: model expects {expected}, input uses {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("token {0} has zero noise mass")]
    ZeroNoiseMass(usize),

    #[error("unsupported checkpoint format version {0}")]
    UnknownFormatVersion(u8),

    #[error("corrupt checkpoint manifest: {0}")]
    CorruptManifest(String),

    #[error("checkpoint payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSize { expected: usize, found: usize },

    #[error("checkpoint tensors incompatible: {}", .0.join("; "))]
    IncompatibleTensors(Vec<String>),

    #[error("linear system is singular; try a regularization constant alpha > 0")]
    SingularSystem,

    #[error("correlation undefined: {0} is constant")]
    ConstantSequence(&'static str),

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
