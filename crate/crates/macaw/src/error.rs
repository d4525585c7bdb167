//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The adjacency matrix contains a directed cycle.
    #[error("directed cycle detected involving variable {0}")]
    Cycle(String),

    /// Matrix or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A variable or row index is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Inconsistent or invalid configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A NaN or infinity reached a computation that requires finite inputs.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// Training produced non-finite losses repeatedly.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A discrete value lies outside its prior's support.
    #[error("value outside prior support: {0}")]
    Support(String),

    /// An eigendecomposition or solve did not yield enough usable rank.
    #[error("rank deficiency: {0}")]
    Rank(String),

    /// Serialized data does not match the expected layout.
    #[error("corrupt container: {0}")]
    Corrupt(String),

    /// Serialized data uses an unsupported format version.
    #[error("unsupported container version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
