use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Input does not match the shape a layer or operation expects.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An operation was called on state that does not support it.
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("encoding error: {0}")]
    Encode(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("{leftovers} sub-vectors still unfrozen at budget exhaustion")]
    Unconverged { leftovers: usize },
}
