use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected record: {0}")]
    RejectedRecord(String),

    #[error("record integrity: {0}")]
    RecordIntegrity(String),

    #[error("split: {0}")]
    Split(String),

    #[error("histogram: {0}")]
    Histogram(String),

    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },

    #[error("line {line}: missing field `{field}`")]
    Schema { line: usize, field: String },

    #[error("index {index} out of range for {size} rows")]
    Index { index: usize, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("loss: {0}")]
    Loss(String),

    #[error("prefix of {len} tokens does not fit max_len {max_len}")]
    GenerationLength { len: usize, max_len: usize },

    #[error("tau {tau} outside 1..={steps}")]
    TauOutOfRange { tau: usize, steps: usize },

    #[error("cosine undefined for zero-norm {0} feature")]
    ZeroNorm(String),

    #[error("training diverged: non-finite {component} loss")]
    Divergence { component: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("candidate index {index} out of range for {count} candidates")]
    CandidateIndex { index: usize, count: usize },

    #[error("session state: {0}")]
    SessionState(String),

    #[error("session complete")]
    SessionComplete,

    #[error("plugin contract violated: {0}")]
    PluginContract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
