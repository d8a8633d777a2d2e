//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    VocabRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("missing gradient on parameter `{0}`")]
    MissingGrad(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at stage {stage}, epoch {epoch}, step {step}: loss is not finite")]
    Diverged {
        stage: u8,
        epoch: usize,
        step: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
