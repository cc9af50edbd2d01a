// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use pti_core::PtiError;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_FILE: i32 = 3;
pub const EXIT_FINGERPRINT: i32 = 4;
pub const EXIT_OUTPUT_EXISTS: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("input file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("output already exists (use --force to overwrite): {}", .0.display())]
    OutputExists(PathBuf),
    #[error(transparent)]
    Core(#[from] PtiError),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Core(PtiError::InvalidConfig(_)) => EXIT_USAGE,
            Self::MissingFile(_) => EXIT_MISSING_FILE,
            Self::OutputExists(_) => EXIT_OUTPUT_EXISTS,
            Self::Core(PtiError::FingerprintMismatch { .. }) => EXIT_FINGERPRINT,
            Self::Core(_) | Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
