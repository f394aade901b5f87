//! Crate-wide error type.

use alloc::string::String;

/// Convenience alias used across the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Failure modes surfaced by validation and the numeric kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration value was rejected before any computation ran.
    InvalidConfig(String),
    /// Observation data violates a structural requirement.
    InvalidData(String),
    /// An index referred outside its declared range.
    IndexOutOfRange { index: usize, bound: usize },
    /// A matrix that must be symmetric positive definite failed the pivot
    /// test during factorization. `pivot` is the offending value.
    NotPositiveDefinite { pivot_index: usize, pivot: f64 },
    /// Two containers that must agree in length did not.
    DimensionMismatch { expected: usize, actual: usize },
    /// A computation produced a non-finite value it cannot recover from.
    NonFinite(String),
}

impl core::fmt::Display for Error {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::InvalidData(msg) => write!(f, "invalid data: {msg}"),
            Error::IndexOutOfRange { index, bound } => {
                write!(f, "index {index} out of range for length {bound}")
            }
            Error::NotPositiveDefinite { pivot_index, pivot } => write!(
                f,
                "matrix is not positive definite: pivot {pivot:e} at index {pivot_index}"
            ),
            Error::DimensionMismatch { expected, actual } => {
                write!(f, "dimension mismatch: expected {expected}, got {actual}")
            }
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
