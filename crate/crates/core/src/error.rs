// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Which half of the cache an intervention targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Visual => f.write_str("visual"),
            Self::Textual => f.write_str("textual"),
        }
    }
}

#[derive(Debug, Error)]
pub enum PtiError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid index set: {0}")]
    InvalidIndices(String),

    #[error("KV cache exhausted at max_seq_len {max}")]
    CacheExhausted { max: usize },

    #[error("model fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("{0} intervention already applied to this cache")]
    AlreadyApplied(Modality),

    #[error("intervention requires an untouched prefill cache (length {len}, origin {origin})")]
    NotAtPrefill { len: usize, origin: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch in {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("step {0} was not recorded in the attention trace")]
    UnrecordedStep(usize),

    #[error("attention row has zero mass on visual positions")]
    ZeroVisualMass,

    #[error("attention traces are not recorded for beam search")]
    TraceUnsupported,

    #[error("measured interval of {ticks} timer ticks is below the 10-tick floor; increase n_tokens")]
    TimerResolution { ticks: f64 },

    #[error("another benchmark is already running in this process")]
    BenchmarkBusy,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, PtiError>;
