use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Coarse classification of failures, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or configuration.
    Usage,
    /// Input data that violates a documented contract.
    Data,
    /// A broken internal invariant (a bug).
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dimension mismatch in instance `{id}`: {detail}")]
    DimensionMismatch { id: String, detail: String },

    #[error("instance `{id}` carries no label but the corpus role is source")]
    MissingLabel { id: String },

    #[error("instance `{id}` has label {label}, but only {n_classes} classes exist")]
    LabelOutOfRange {
        id: String,
        label: usize,
        n_classes: usize,
    },

    #[error("instance `{id}` contains a non-finite value at channel {channel}, step {step}")]
    NonFinite {
        id: String,
        channel: usize,
        step: usize,
    },

    #[error("patch length {patch_length} exceeds series length {length}; the patch grid would be empty")]
    EmptyGrid { patch_length: usize, length: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("code index {index} out of range for a codebook of {n_codes}")]
    IndexOutOfRange { index: usize, n_codes: usize },

    #[error("transition {from} -> {to} has zero probability; smooth the matrix before scoring")]
    ZeroTransition { from: usize, to: usize },

    #[error("marginal violation: {0}")]
    Marginal(String),

    #[error("code vector {0} has zero norm")]
    ZeroNormCode(usize),

    #[error("id mismatch: {0}")]
    IdMismatch(String),

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::Internal(_) => ErrorKind::Internal,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
