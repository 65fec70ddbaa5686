//! `run.json` records: what ran, with which settings, on which inputs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: Value,
    /// SHA-256 of the compact JSON encoding of `config` (keys sorted).
    pub config_sha256: String,
    pub inputs: Vec<InputDigest>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunRecord {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: sha256_hex(&serde_json::to_vec(&config)?),
            config,
            inputs: Vec::new(),
        })
    }

    pub fn with_config(mut self, config: &impl Serialize) -> Result<Self> {
        self.config = serde_json::to_value(config)?;
        self.config_sha256 = sha256_hex(&serde_json::to_vec(&self.config)?);
        Ok(self)
    }

    /// Records the digest of a file read or written by the run.
    pub fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        self.inputs.push(InputDigest {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(self)
    }

    /// Writes `<dir>/run.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        self.write_to(&dir.join("run.json"))
    }

    /// Writes `<file>.run.json` next to a single-file output.
    pub fn write_beside(&self, file: &Path) -> Result<()> {
        self.write_to(&sibling(file, "run.json"))
    }

    fn write_to(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
    }
}

/// `<file>.<suffix>` in the same directory.
pub fn sibling(file: &Path, suffix: &str) -> PathBuf {
    let mut name = file
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".");
    name.push(suffix);
    file.with_file_name(name)
}

/// The reward weight recorded by `finetune` in `<dir>/run.json`.
pub fn recorded_lambda(dir: &Path) -> Result<f64> {
    let path = dir.join("run.json");
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let record: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    record
        .pointer("/config/lambda")
        .and_then(Value::as_f64)
        .with_context(|| format!("{} records no lambda; pass --lambdas", path.display()))
}
