use thiserror::Error;

/// Errors raised by the library surface.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("batch length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("KL divergence undefined: q[{index}] = 0 but p[{index}] = {p_val} > 0")]
    SupportViolation { index: usize, p_val: f64 },

    #[error("not a probability vector: {0}")]
    InvalidDistribution(String),

    #[error("non-finite feature value at index {0}")]
    NonFinite(usize),

    #[error("empty sample")]
    EmptySample,

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty list")]
    EmptyList,

    #[error("index {index} out of range for alphabet of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("constraint violated: {0}")]
    ConstraintViolated(String),

    #[error("duplicate class name: {0}")]
    DuplicateClass(String),

    #[error("unknown superclass: {0}")]
    UnknownSuperclass(String),

    #[error("candidate {0} collides with a seen class")]
    NameCollision(String),

    #[error("missing embedding for class {0}")]
    MissingEmbedding(String),

    #[error("class {class} has {have} samples, need at least {need}")]
    InsufficientSamples {
        class: String,
        have: usize,
        need: usize,
    },

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("embedding offset cancels the base vector (norm below 1e-9)")]
    DegenerateSum,

    #[error("label {0} is outside the class set")]
    LabelOutsideClassSet(usize),

    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),

    #[error("generated unseen classes overlap seen classes: {0:?}")]
    DisjointnessViolation(Vec<usize>),

    #[error("alignment triggered but a generated set is empty")]
    EmptyGenerated,

    #[error("empty test set")]
    EmptyTestSet,

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("unknown variant: {0}")]
    UnknownVariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;
