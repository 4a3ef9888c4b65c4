//! Run-directory layout and the manifest written before training starts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dualcls::{Error, Result, RunConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    /// Parameter initialisation, shuffling, corruption and dropout all derive from this.
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub corpus_path: PathBuf,
    pub corpus_sha256: String,
    pub seeds: Seeds,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

impl RunManifest {
    pub fn new(config: RunConfig, corpus_path: &Path, corpus_bytes: &[u8]) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: Seeds {
                train: config.train.seed,
            },
            config,
            corpus_path: corpus_path.to_path_buf(),
            corpus_sha256: sha256_hex(corpus_bytes),
            started_unix: unix_now(),
            finished_unix: None,
        }
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
