use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("no support pattern satisfies the KKT conditions within {tol:e}")]
    NoKktSupport { tol: f64 },

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("idx: bad magic number {found:#010x} (expected {expected:#010x})")]
    IdxMagic { found: u32, expected: u32 },

    #[error("idx: truncated payload (need {needed} bytes, have {available})")]
    IdxTruncated { needed: usize, available: usize },

    #[error("idx: dimensions overflow addressable size")]
    IdxDimOverflow,

    #[error("label {label} at index {index} outside [0, {class_count})")]
    LabelRange {
        label: usize,
        index: usize,
        class_count: usize,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
