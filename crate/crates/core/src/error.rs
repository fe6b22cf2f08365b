use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("`{0}` must be positive")]
    NonPositive(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rotary position {requested} exceeds table capacity {capacity}")]
    PositionOverflow { requested: usize, capacity: usize },
    #[error("density operator needs at least one sequence position")]
    EmptySequence,
    #[error("potential tensor base must be positive, found {0}")]
    NonPositiveBase(f64),
    #[error("gradient mismatch at coordinate {index}: analytic {analytic}, numeric {numeric} (rel err {rel_err:e})")]
    GradMismatch {
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
    },
    #[error("sequence of {len} tokens exceeds context length {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("caches are not primed")]
    NotPrimed,
    #[error("caches are already primed")]
    AlreadyPrimed,
    #[error("invalid cache mode: {0}")]
    InvalidCacheMode(&'static str),
    #[error("operation requires the {expected} variant, model is {found}")]
    VariantMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("G override is only valid for the trainable variant: {0}")]
    InvalidOverride(String),
    #[error("sampling distribution is degenerate (all candidates masked)")]
    DegenerateDistribution,
    #[error("corpus produced no tokens")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("{0} did not converge")]
    NoConvergence(&'static str),
    #[error("need at least two heads to compare, found {0}")]
    SingleHead(usize),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
