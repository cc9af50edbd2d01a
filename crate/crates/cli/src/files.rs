// SPDX-License-Identifier: MIT OR Apache-2.0

//! Input checks, no-clobber outputs and JSON helpers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn require_input(path: &Path) -> CliResult<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::MissingFile(path.to_owned()))
    }
}

/// Every path a command will write. Checked up front so a refused run
/// leaves nothing behind.
#[derive(Debug, Default)]
pub struct Outputs {
    paths: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(primary: &Path) -> Self {
        let mut out = Self::default();
        out.add(primary);
        out.add(&manifest_path(primary));
        out
    }

    pub fn add(&mut self, path: &Path) -> &mut Self {
        self.paths.push(path.to_owned());
        self
    }

    pub fn check(&self, force: bool) -> CliResult<()> {
        if force {
            return Ok(());
        }
        match self.paths.iter().find(|p| p.exists()) {
            Some(p) => Err(CliError::OutputExists(p.clone())),
            None => Ok(()),
        }
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    sibling(primary, "manifest.json")
}

/// `<path>.<suffix>` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(require_input(path)?).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing JSON")?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
