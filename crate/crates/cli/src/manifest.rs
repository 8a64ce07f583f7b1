use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Self-description written once at the end of every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    pub status: String,
}

pub struct RunRecorder {
    manifest: RunManifest,
    started: Instant,
}

impl RunRecorder {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Self {
        Self {
            manifest: RunManifest {
                command: command.into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                seed,
                config: serde_json::to_value(config).expect("config serializes"),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                wall_clock_seconds: 0.0,
                status: "ok".into(),
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, key: &str, path: &Path) {
        self.manifest.inputs.insert(key.into(), path.display().to_string());
    }

    pub fn output(&mut self, key: &str, path: &Path) {
        self.manifest.outputs.insert(key.into(), path.display().to_string());
    }

    /// Writes `run_manifest.json` into `dir` via a temporary file and rename.
    pub fn finish(mut self, dir: &Path, status: &str) -> Result<PathBuf, CliError> {
        self.manifest.status = status.into();
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let path = dir.join(RUN_MANIFEST_FILE);
        let tmp = dir.join(format!("{RUN_MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&tmp, text + "\n").map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let path = if path.is_dir() { path.join(RUN_MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
