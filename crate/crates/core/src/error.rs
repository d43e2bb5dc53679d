use crate::volume::Dims;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: Dims, right: Dims },

    #[error("invalid dimensions {0}")]
    InvalidDims(Dims),

    #[error("data length {len} does not match dims {dims} ({expected} elements)")]
    LengthMismatch { dims: Dims, len: usize, expected: usize },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("non-binary mask value {value} at flat index {index}")]
    NonBinary { index: usize, value: u8 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unachievable phantom: {0}")]
    Unachievable(String),
}
