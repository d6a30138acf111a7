use std::fs;
use std::path::Path;

use ratio_forge_core::gan::StabilityFlag;
use ratio_forge_core::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "log.csv";

/// Everything needed to rerun a training run bit-exactly, plus what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config: TrainConfig,
    pub snapshot_every: usize,
    pub snapshot_size: usize,
    pub artifacts: Artifacts,
    pub status: RunStatus,
    pub wall_clock: WallClock,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Artifacts {
    pub log: String,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunStatus {
    pub steps_done: usize,
    pub finished: bool,
    pub halted: Option<StabilityFlag>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WallClock {
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub elapsed_secs: f64,
}

/// Short content hash of the resolved configuration.
pub fn run_id(config: &TrainConfig) -> CliResult<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(hex::encode(&digest[..6]))
}

impl RunManifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}
