// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;

use crate::error::CliResult;
use crate::files::{manifest_path, write_json};

/// Provenance record written next to the primary output of every run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub rng_seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_owned(),
            config_path: None,
            rng_seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            started_at: now(),
            finished_at: None,
        }
    }

    pub fn config(mut self, path: Option<&Path>) -> Self {
        self.config_path = path.map(Path::to_owned);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.rng_seed = Some(seed);
        self
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.to_owned());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.to_owned());
        self
    }

    /// Stamps the finish time and writes `<primary>.manifest.json`.
    pub fn finish(mut self, primary: &Path) -> CliResult<()> {
        self.finished_at = Some(now());
        if !self.outputs.iter().any(|p| p == primary) {
            self.outputs.insert(0, primary.to_owned());
        }
        write_json(&manifest_path(primary), &self)
    }
}
