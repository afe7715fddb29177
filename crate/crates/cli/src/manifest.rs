//! Run manifests: what was run, with which resolved config, producing which files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use nightseg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub variant: String,
    pub seed: u64,
    pub metrics: String,
    pub final_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, program name excluded.
    pub args: Vec<String>,
    pub config: TrainConfig,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Paths relative to `out_dir`.
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<RunEntry>,
}

/// Git blob-style digest (`"blob <len>\0" ++ bytes`) of the canonical
/// config JSON, with SHA-256 in place of SHA-1.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    /// Creates `out_dir` and writes the manifest before any work starts.
    pub fn begin(command: &str, cfg: &TrainConfig, seeds: Vec<u64>, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
        let m = Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: cfg.clone(),
            config_hash: config_hash(cfg),
            seeds,
            out_dir: out_dir.to_path_buf(),
            started_unix: now(),
            finished_unix: None,
            outputs: Vec::new(),
            runs: Vec::new(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    pub fn finish(mut self) -> Result<()> {
        self.finished_unix = Some(now());
        self.write()
    }

    fn write(&self) -> Result<()> {
        let path = self.out_dir.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(self)?)
            .with_context(|| format!("cannot write {}", path.display()))
    }
}
