use thiserror::Error;

/// Errors raised anywhere in the compression toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange { what: &'static str, index: usize, limit: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("missing data: {0}")]
    Missing(String),

    #[error("invalid prune decision: {0}")]
    InvalidDecision(String),

    #[error("wrong architecture: expected {expected}, found {found}")]
    WrongArch { expected: String, found: String },

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checksum mismatch")]
    Checksum,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("run directory locked: {0}")]
    Locked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::NotScalar(_) => "not_scalar",
            Error::TapeConsumed => "tape_consumed",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InvalidConfig(_) => "invalid_config",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::Missing(_) => "missing",
            Error::InvalidDecision(_) => "invalid_decision",
            Error::WrongArch { .. } => "wrong_arch",
            Error::InvalidPlan(_) => "invalid_plan",
            Error::Empty(_) => "empty",
            Error::Checksum => "checksum",
            Error::Version { .. } => "version",
            Error::Format(_) => "format",
            Error::Locked(_) => "locked",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
