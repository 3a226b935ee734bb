//! Error type shared across the crate.
//!
//! Variants are grouped by how callers react to them: `is_validation` covers
//! anything caused by bad inputs or configuration (the CLI maps these to exit
//! code 1), everything else is a runtime failure (exit code 2).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported version {found} (expected {expected})")]
    VersionMismatch {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated file, {context}")]
    Truncated { path: String, context: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },

    #[error("invalid annotation in {video}: {reason}")]
    InvalidAnnotation { video: String, reason: String },

    #[error("video {video}: instances {a} and {b} overlap in time")]
    OverlappingInstances { video: String, a: usize, b: usize },

    #[error("infeasible synthetic spec: {0}")]
    SpecInfeasible(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("training aborted: {0}")]
    TrainingAborted(String),
}

impl Error {
    /// True for errors caused by invalid user input (files, flags, configs),
    /// as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::VersionMismatch { .. }
                | Error::Truncated { .. }
                | Error::NonFinite { .. }
                | Error::Json { .. }
                | Error::InvalidAnnotation { .. }
                | Error::OverlappingInstances { .. }
                | Error::SpecInfeasible(_)
                | Error::InvalidConfig(_)
                | Error::ShapeMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
