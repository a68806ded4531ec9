//! Error types shared across the crate.

use alloc::string::String;
use core::fmt;

/// Errors raised by tensor ops, model construction, pruning, and training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    Dimension(String),
    /// An argument violates a precondition (non-positive step, bad scheme, ...).
    Invalid(String),
    /// Internal bookkeeping is inconsistent (missing tape slot, unfrozen mask
    /// at merge time, ...).
    Sequencing(String),
    /// A numeric result is not finite where it has to be.
    NonFinite(String),
    /// Training diverged or the dataset is unusable.
    Train(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Invalid(m) => write!(f, "invalid argument: {m}"),
            Error::Sequencing(m) => write!(f, "sequencing error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Train(m) => write!(f, "training error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

/// Errors raised while encoding or decoding bitstreams and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub enum CodecError {
    /// Stream ended early or a length field points past the end.
    Truncated { offset: usize },
    /// Magic bytes or version field do not match.
    BadHeader { offset: usize, detail: String },
    /// A decoded frequency fell outside the CDF table.
    Corrupt { offset: usize, detail: String },
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecError::Truncated { offset } => {
                write!(f, "truncated stream at byte offset {offset}")
            }
            CodecError::BadHeader { offset, detail } => {
                write!(f, "bad header at byte offset {offset}: {detail}")
            }
            CodecError::Corrupt { offset, detail } => {
                write!(f, "corrupt stream near byte offset {offset}: {detail}")
            }
        }
    }
}

impl core::error::Error for CodecError {}
