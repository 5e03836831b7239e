use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure classes the library
/// distinguishes at its boundaries: shape mismatches, semantic validation,
/// malformed archive bytes, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions are incompatible (message names both shapes).
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Inputs are well-formed but violate a contract (ranges, missing tensors,
    /// inconsistent schedules, ...).
    #[error("validation failed: {0}")]
    Validation(String),
    /// A file is not a recognizable archive (magic/version/header).
    #[error("bad archive format: {0}")]
    Format(String),
    /// A structurally valid archive declares impossible payload regions.
    #[error("corrupt archive: {0}")]
    Corruption(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
