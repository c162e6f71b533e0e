use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("semantic id {id} at position {position} is outside the data range [0, {limit})")]
    SemanticIdOutOfRange { position: usize, id: u32, limit: u32 },

    #[error("acoustic cell (t={t}, k={k}) holds {id}, outside [0, {limit})")]
    AcousticIdOutOfRange { t: usize, k: usize, id: u32, limit: u32 },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("downsample factor must be positive")]
    ZeroDownsample,

    #[error("grid shape mismatch: {0}")]
    Shape(String),

    #[error("malformed delayed grid at row {row}, codebook {codebook}: {reason}")]
    MalformedDelay { row: usize, codebook: usize, reason: String },

    #[error("step {step} outside [1, {rows}]")]
    StepOutOfRange { step: usize, rows: usize },

    #[error("text is empty after normalization")]
    EmptyText,

    #[error("text needs {len} slots but the budget is {budget}; segment it first")]
    TextOverBudget { len: usize, budget: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("sequence of {len} steps exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("{component} does not fit: needs {needed} slots, {available} available")]
    OverBudget {
        component: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("invalid {kind} id {id}")]
    InvalidId { kind: &'static str, id: u32 },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("mixed sample rates: {0} Hz and {1} Hz")]
    MixedSampleRates(u32, u32),

    #[error("record parse error on line {line}: {reason}")]
    Record { line: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, Error>;
