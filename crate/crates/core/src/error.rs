use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A Runge-Kutta stage produced NaN or infinity.
    #[error("non-finite value in Runge-Kutta stage {stage}")]
    StageOverflow { stage: usize },
    /// A stage overflowed during multi-step integration.
    #[error("non-finite value at integration step {step}, stage {stage}")]
    StepOverflow { step: usize, stage: usize },
    #[error("global error {error:e} at {n_steps} steps is below the precision floor")]
    PrecisionFloor { n_steps: usize, error: f64 },
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("non-finite output from {op}")]
    Overflow { op: &'static str },
    #[error("variable was not produced by this tape")]
    DetachedGraph,
    #[error("block state error: {0}")]
    State(&'static str),
    #[error("sequence length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("batch contains no non-pad target tokens")]
    EmptyBatch,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("unknown {kind} '{value}'")]
    Parse { kind: &'static str, value: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
