use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {0:e} is too small to normalize")]
    ZeroNorm(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("function evaluation produced a non-finite value at coordinate {0}")]
    NonFiniteEvaluation(usize),
    #[error("vector is not unit-norm (norm = {0})")]
    NotNormalized(f64),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("statistics requested for an empty set")]
    EmptySet,
    #[error("k-means needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("assignment has {got} clusters but the state has {expected}")]
    StaleAssignment { expected: usize, got: usize },
    #[error("feature queue is empty")]
    EmptyQueue,
    #[error("activation tape does not match the network: {0}")]
    TapeMismatch(String),
    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("step {step} outside schedule range [0, {total}]")]
    RangeError { step: u64, total: u64 },
    #[error("invalid configuration `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("k = {k} exceeds the training set size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("labelings have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite loss at step {step}: total={total}, l1={l1}, l2={l2}, l3={l3}")]
    NonFiniteLoss {
        step: u64,
        total: f64,
        l1: f64,
        l2: f64,
        l3: f64,
    },
    #[error("corrupt file (section `{section}`): {detail}")]
    CorruptFile { section: String, detail: String },
    #[error("malformed data file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(key: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn corrupt(section: &str, detail: impl Into<String>) -> Self {
        Error::CorruptFile {
            section: section.to_string(),
            detail: detail.into(),
        }
    }
}
