use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("query row {row} of head {head} has every key masked out")]
    FullyMaskedRow { head: usize, row: usize },

    #[error("block row {block_row} of head {head} keeps no key blocks")]
    EmptyBlockRow { head: usize, block_row: usize },

    #[error("zero block budget for head {head}{}", .block_row.map(|r| format!(" row {r}")).unwrap_or_default())]
    ZeroBudget { head: usize, block_row: Option<usize> },

    #[error("non-finite LSE at head {head} row {row}")]
    NonFiniteLse { head: usize, row: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("LSE cache is empty; the fused search at the warmup step has not run")]
    EmptyLseCache,
}
