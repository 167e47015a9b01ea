use thiserror::Error;

/// Errors produced anywhere in the training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("parameter stores are not congruent: {0}")]
    Incongruent(String),
    #[error("token {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: usize, size: usize },
    #[error("sequence length {got} does not match the configured length {expected}")]
    SequenceLength { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("enumeration of {count} sequences exceeds the limit of {limit}")]
    TooLarge { count: u128, limit: u128 },
    #[error("invalid grammar: {0}")]
    Grammar(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("phase order violation: {0}")]
    PhaseOrder(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
