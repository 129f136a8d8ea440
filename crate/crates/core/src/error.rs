use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric fault: {op} produced a non-finite value")]
    NumericFault { op: &'static str },
    #[error("tensor does not belong to this tape")]
    DetachedTensor,
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("degenerate vector: zero norm")]
    DegenerateVector,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the budget of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("masked batch has no supervised positions")]
    EmptySupervision,
    #[error("empty batch")]
    EmptyBatch,
    #[error("nothing to pool over")]
    EmptyPool,
    #[error("index error: {0}")]
    Index(String),
    #[error("need at least {needed} examples, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("stage order violation: {0}")]
    Lineage(String),
    #[error("correlation undefined for constant scores")]
    UndefinedCorrelation,
    #[error("unsupported: {0}")]
    Unsupported(String),
}
