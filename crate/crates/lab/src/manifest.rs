//! Per-run manifest recording which checkpoint each stage consumed.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const FILE_NAME: &str = "manifest.json";

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub command: String,
    /// Checkpoints are named relative to the run directory.
    pub input: Option<String>,
    pub output: Option<String>,
    pub seed: u64,
    pub config_hash: String,
    pub wall_clock_secs: f64,
    /// Checks bypassed or flags overriding the config, e.g. `allow-skip`.
    #[serde(default)]
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageEntry>,
    /// Most recent checkpoint written by any stage.
    pub latest: Option<String>,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self { version: version_string(), config_hash, seed, stages: Vec::new(), latest: None }
    }

    pub fn load(run_dir: &Path) -> io::Result<Option<Self>> {
        let path = run_dir.join(FILE_NAME);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, run_dir: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(run_dir.join(FILE_NAME), text + "\n")
    }

    pub fn record(&mut self, entry: StageEntry) {
        if entry.output.is_some() {
            self.latest.clone_from(&entry.output);
        }
        self.config_hash.clone_from(&entry.config_hash);
        self.stages.push(entry);
    }

    /// Output of the most recent stage run by `command`.
    pub fn output_of(&self, command: &str) -> Option<&str> {
        self.stages.iter().rev().find(|s| s.command == command).and_then(|s| s.output.as_deref())
    }
}
