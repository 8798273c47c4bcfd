use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("window exceeds available history (requested T={requested}, available {available})")]
    WindowExceedsHistory { requested: usize, available: usize },

    #[error("window length {len} exceeds model context T_max={t_max}")]
    WindowTooLong { len: usize, t_max: usize },

    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },

    #[error("dimension mismatch for tensors: {}", names.join(", "))]
    DimMismatch { names: Vec<String> },

    #[error("missing tensor {name} in checkpoint")]
    MissingTensor { name: String },

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step} (term {term})")]
    NanLoss { step: usize, term: String },

    #[error("unknown user id {0}")]
    UnknownUser(usize),

    #[error("session already terminated")]
    SessionDone,

    #[error("LoRA adapters already attached")]
    LoraAlreadyAttached,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
