// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Every failure the toolkit reports.
///
/// Variants are grouped by what the caller can do about them: input and
/// geometry problems are fixed by changing arguments, integrity and
/// provenance problems by regenerating artifacts, transport and
/// divergence problems by retrying or re-tuning.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("empty concept catalog after filtering ({})", .reasons.join("; "))]
    EmptyCatalog { reasons: Vec<String> },

    #[error("transport error at {context}: {message}")]
    Transport { context: String, message: String },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("optimization diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    #[error("index out of range: {0}")]
    Range(String),

    #[error("region of interest is empty")]
    EmptyRoi,

    #[error("data error: {0}")]
    Data(String),

    #[error("provenance mismatch for {artifact}: expected {expected}, found {found}")]
    Provenance {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("stage order: missing upstream artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("output directory is locked by another process ({})", .0.display())]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
}
