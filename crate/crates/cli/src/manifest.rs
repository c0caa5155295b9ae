//! Per-run manifest: the resolved configuration, seed, input and output
//! paths, tool version and wall-clock timestamps. Each command writes one so
//! a run is replayable from the manifest alone.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub notes: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            tool: "voiceface",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Finalizes and writes the manifest; every referenced output must exist.
    pub fn write(mut self, path: &Path) -> Result<(), CliError> {
        self.finished_unix = unix_now();
        for (name, out) in &self.outputs {
            if !Path::new(out).exists() {
                return Err(CliError::Io(format!(
                    "manifest output {name} missing on disk: {out}"
                )));
            }
        }
        let body = serde_json::to_string_pretty(&self)
            .map_err(|e| CliError::Io(format!("serializing manifest: {e}")))?;
        std::fs::write(path, body + "\n")
            .map_err(|e| CliError::Io(format!("writing manifest {}: {e}", path.display())))
    }
}
