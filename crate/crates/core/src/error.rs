use alloc::string::String;

use crate::membank::ClassId;

/// Errors raised by the segmentation engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid shape for {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("mask selects no cells")]
    EmptyMask,
    #[error("memory pool has no usable records")]
    EmptyPool,
    #[error("class {0} is already stored")]
    DuplicateClass(ClassId),
    #[error("class {0} is not stored")]
    UnknownClass(ClassId),
    #[error("cannot form {clusters} clusters from {points} points")]
    ClusterCount { clusters: usize, points: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = core::result::Result<T, Error>;
