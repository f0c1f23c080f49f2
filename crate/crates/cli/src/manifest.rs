use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use hpgan_core::networks::ModelConfig;
use hpgan_core::training::CHECKPOINT_VERSION;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub(crate) fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Everything needed to re-run a command; written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config: Option<ModelConfig>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub checkpoint_version: u32,
    pub started_unix: f64,
    pub finished_unix: f64,
}

impl RunManifest {
    pub fn start(subcommand: &str, argv: Vec<String>, seed: Option<u64>) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            argv,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_version: CHECKPOINT_VERSION,
            started_unix: unix_now(),
            finished_unix: 0.0,
        }
    }

    pub fn finish(mut self, path: &Path) -> Result<(), Failure> {
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self).map_err(|e| Failure::Runtime(e.to_string()))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
    }
}

/// Manifest location for a single output file: `<file>.manifest.json`.
pub(crate) fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
