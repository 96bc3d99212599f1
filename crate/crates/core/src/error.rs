use std::io;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("label error at line {line}: {label:?} is not 0 or 1")]
    Label { line: usize, label: String },

    #[error("lookup error: feature {feature} of field {field} is outside vocabulary {vocab}")]
    Lookup { field: usize, feature: usize, vocab: usize },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric error at instance {index}: {message}")]
    Numeric { index: usize, message: String },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("model file error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("dimension error: expected {expected}, file has {found}")]
    Dimension { expected: usize, found: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
