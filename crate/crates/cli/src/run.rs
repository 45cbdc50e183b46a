//! Per-invocation bookkeeping: output registration, input digests, the run
//! manifest and cleanup of partial outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub created_at: String,
}

pub struct Run {
    subcommand: &'static str,
    out_dir: PathBuf,
    seed: u64,
    config: BTreeMap<String, String>,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(subcommand: &'static str, out_dir: &Path, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
        Ok(Self {
            subcommand,
            out_dir: out_dir.to_path_buf(),
            seed,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn record_config(&mut self, entries: Vec<(&'static str, String)>) {
        self.config
            .extend(entries.into_iter().map(|(k, v)| (k.to_string(), v)));
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    /// Hash an input file and remember it for the manifest. A missing file is
    /// reported by name.
    pub fn input(&mut self, path: &Path) -> Result<PathBuf> {
        let bytes = std::fs::read(path).with_context(|| format!("missing input {}", path.display()))?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(path.to_path_buf())
    }

    /// Reserve an output path. Relative names land in the output directory.
    pub fn output(&mut self, name: impl AsRef<Path>) -> PathBuf {
        let name = name.as_ref();
        let path = if name.is_absolute() {
            name.to_path_buf()
        } else {
            self.out_dir.join(name)
        };
        self.outputs.push(path.clone());
        path
    }

    /// Delete every registered output that exists.
    pub fn cleanup(&self) {
        for p in &self.outputs {
            if p.exists() {
                if let Err(e) = std::fs::remove_file(p) {
                    log::warn!("could not remove partial output {}: {e}", p.display());
                }
            }
        }
    }

    pub fn finish(mut self) -> Result<()> {
        for p in &self.outputs {
            anyhow::ensure!(p.is_file(), "output {} was not written", p.display());
        }
        let manifest_path = self.output(MANIFEST_FILE);
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .and_then(|d| chrono::DateTime::from_timestamp(d.as_secs() as i64, 0))
            .map(|t| t.to_rfc3339())
            .unwrap_or_default();
        let manifest = RunManifest {
            subcommand: self.subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: std::mem::take(&mut self.config),
            inputs: std::mem::take(&mut self.inputs),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            created_at,
        };
        let result = parkrate::io::write_json(&manifest_path, &manifest);
        if result.is_err() {
            self.cleanup();
        }
        Ok(result?)
    }
}
