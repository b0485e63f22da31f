use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("linear solve is singular or ill-conditioned (rcond = {rcond:e})")]
    SingularMatrix { rcond: f64 },
    #[error("step size must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input sequence is empty")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("state size must be even, got {0}")]
    OddStateSize(usize),
    #[error("model dimension must be even, got {0}")]
    OddModelDim(usize),
    #[error("attention row {0} has every key masked")]
    AllMaskedRow(usize),
    #[error("operation requires the {expected} decoder variant")]
    VariantMismatch { expected: &'static str },
    #[error("decoder state is inconsistent: {0}")]
    StateCorrupt(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(alloc::vec::Vec<usize>),
    #[error("loss node does not belong to this tape")]
    DetachedLoss,
    #[error("backward already ran on this tape; record a new one")]
    TapeConsumed,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
