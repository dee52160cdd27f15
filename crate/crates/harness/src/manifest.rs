//! Per-run manifest: what ran, with which seeds, and what it wrote.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ScenarioConfig, SeedsCfg};

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: Vec<String>,
    pub seeds: SeedsCfg,
    pub version: String,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub files: Vec<FileEntry>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn file_sha256(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Collects produced files during a run and writes `<command>_manifest.json`
/// once.
pub struct ManifestBuilder {
    command: String,
    configs: Vec<String>,
    seeds: SeedsCfg,
    started: u64,
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str, configs: &[&ScenarioConfig], dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            configs: configs.iter().map(|c| c.sha256()).collect(),
            seeds: configs.first().map(|c| c.seeds).unwrap_or_default(),
            started: now(),
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn finish(self) -> Result<PathBuf> {
        let mut files = Vec::with_capacity(self.files.len());
        for f in &self.files {
            let (sha256, bytes) = file_sha256(f)?;
            let rel = f.strip_prefix(&self.dir).unwrap_or(f);
            files.push(FileEntry {
                path: rel.display().to_string(),
                sha256,
                bytes,
            });
        }
        let m = RunManifest {
            command: self.command,
            config_sha256: self.configs,
            seeds: self.seeds,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_s: self.started,
            finished_unix_s: now(),
            files,
        };
        let path = self.dir.join(format!("{}_manifest.json", m.command));
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
