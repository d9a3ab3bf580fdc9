use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one invocation, written before any work starts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub subcommand: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    /// SHA-256 of every spec or input file the run depends on.
    pub spec_hashes: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config)?,
            spec_hashes: BTreeMap::new(),
            seed,
            outputs: Vec::new(),
        })
    }

    pub fn hash_bytes(&mut self, label: &str, bytes: &[u8]) {
        self.spec_hashes.insert(label.to_string(), hex::encode(Sha256::digest(bytes)));
    }

    pub fn hash_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.hash_bytes(&path.display().to_string(), &bytes);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
