use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FORMAT: &str = "layerlens-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every command's outputs.
#[derive(Serialize)]
pub struct Manifest {
    format: &'static str,
    command: &'static str,
    flags: serde_json::Value,
    inputs: BTreeMap<String, String>,
    seed: Option<u64>,
    version: &'static str,
    outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &'static str, flags: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            format: MANIFEST_FORMAT,
            command,
            flags: serde_json::to_value(flags)?,
            inputs: BTreeMap::new(),
            seed,
            version: env!("CARGO_PKG_VERSION"),
            outputs: Vec::new(),
        })
    }

    /// Records the SHA-256 of an input file.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.inputs.insert(path.display().to_string(), hex);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        self.outputs.sort();
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(path)
    }
}
