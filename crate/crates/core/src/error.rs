use thiserror::Error;

/// Errors produced anywhere in the adaptation runtime.
#[derive(Debug, Error)]
pub enum TtaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("batch statistics need at least 2 samples, got {0}")]
    SingletonBatch(usize),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("activation cache unusable: {0}")]
    Cache(String),

    #[error("fingerprint mismatch: expected {expected}, got {actual}")]
    Fingerprint { expected: String, actual: String },

    #[error("detector misuse: {0}")]
    DetectorState(String),

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("clustering failed: {0}")]
    Clustering(String),

    #[error("source model reached {accuracy:.4} clean accuracy, below the {required:.2} bar")]
    SourceFit { accuracy: f64, required: f64 },

    #[error("unsupported document version {0}")]
    Version(u32),

    #[error("serialization: {0}")]
    Serde(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TtaError>;

impl From<serde_json::Error> for TtaError {
    fn from(e: serde_json::Error) -> Self {
        TtaError::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for TtaError {
    fn from(e: toml::de::Error) -> Self {
        TtaError::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for TtaError {
    fn from(e: toml::ser::Error) -> Self {
        TtaError::Serde(e.to_string())
    }
}
