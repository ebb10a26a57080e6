use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("pivot [H^-1]_pp = {value:e} is numerically singular")]
    NumericallySingular { value: f64 },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of {len} positions exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("tape was recorded at model version {tape}, model is at {model}")]
    StaleTape { tape: u64, model: u64 },
    #[error("{what} index {index} out of range ({len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("pruning would breach the {what} floor ({current} <= {floor})")]
    FloorViolation {
        what: &'static str,
        current: usize,
        floor: usize,
    },
    #[error("group was built against a different model shape")]
    StaleGroup,
    #[error("no eligible pruning candidate (every enabled type is at its floor)")]
    NoEligibleCandidate,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("corpus split has {have} tokens, need at least {need}")]
    CorpusTooSmall { have: usize, need: usize },
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("trace: {0}")]
    Trace(String),
    #[error("report: {0}")]
    Report(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "SHAPE_MISMATCH",
            Error::NotPositiveDefinite { .. } => "NOT_POSITIVE_DEFINITE",
            Error::NumericallySingular { .. } => "NUMERICALLY_SINGULAR",
            Error::TokenOutOfRange { .. } => "TOKEN_OUT_OF_RANGE",
            Error::SequenceTooLong { .. } => "SEQUENCE_TOO_LONG",
            Error::EmptyInput(_) => "EMPTY_INPUT",
            Error::StaleTape { .. } => "STALE_TAPE",
            Error::IndexOutOfRange { .. } => "INDEX_OUT_OF_RANGE",
            Error::FloorViolation { .. } => "FLOOR_VIOLATION",
            Error::StaleGroup => "STALE_GROUP",
            Error::NoEligibleCandidate => "NO_ELIGIBLE_CANDIDATE",
            Error::NonFiniteLoss { .. } => "NON_FINITE_LOSS",
            Error::CorpusTooSmall { .. } => "CORPUS_TOO_SMALL",
            Error::EmptySplit => "EMPTY_SPLIT",
            Error::Config { .. } => "CONFIG",
            Error::Checkpoint(_) => "CHECKPOINT",
            Error::UnsupportedVersion(_) => "UNSUPPORTED_VERSION",
            Error::Trace(_) => "TRACE",
            Error::Report(_) => "REPORT",
            Error::Csv(_) => "CSV",
            Error::Json(_) => "JSON",
            Error::Io(_) => "IO",
        }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
