//! Error types shared across the simulation lab.

use thiserror::Error;

/// Errors produced by tensors, models, clients, and loaders.
#[derive(Debug, Error)]
pub enum FlError {
    /// Tensor or parameter shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Two parameter- or statistics-shaped values are not congruent
    /// (different layer names, counts, or per-layer sizes).
    #[error("structural mismatch: {0}")]
    Structure(String),

    /// A batch too small to yield meaningful batch statistics.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values produced by a numeric kernel.
    #[error("non-finite values: {0}")]
    NonFinite(String),

    /// Non-finite model parameters after a local step.
    #[error("divergence at local step {step} of client {client}: {detail}")]
    Divergence {
        client: usize,
        step: usize,
        detail: String,
    },

    /// Malformed binary dataset file.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlError>;
