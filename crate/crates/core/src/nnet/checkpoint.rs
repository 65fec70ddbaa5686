//! Checkpoint container: magic, JSON manifest, little-endian f32 payload.
//!
//! ```text
//! b"NXKC" | u32 LE manifest length | manifest JSON | payload
//! ```
//!
//! The manifest lists every tensor (name, shape, dtype) in payload order,
//! the model config, and a SHA-256 of the payload. Writes go to a temporary
//! file in the target directory followed by a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{ModelConfig, ModelParams};
use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"NXKC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    pub payload_sha256: String,
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut payload = Vec::with_capacity(params.num_parameters() * 4);
    let mut tensors = Vec::new();
    for (name, t) in params.named() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
        });
        for &v in t.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        tensors,
        payload_bytes: payload.len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let corrupt = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header = bytes
        .get(8..8 + header_len)
        .ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(header)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let payload = &bytes[8 + header_len..];
    if payload.len() != manifest.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest says {} (truncated?)",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    manifest.config.validate()?;
    let mut params = ModelParams::zeros(&manifest.config);
    let mut named = params.named_mut();
    if named.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            named.len()
        )));
    }
    let mut offset = 0;
    for ((name, t), entry) in named.iter_mut().zip(&manifest.tensors) {
        if *name != entry.name || t.shape() != entry.shape.as_slice() || entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} ({}) does not match expected {name} {:?}",
                entry.name,
                entry.shape,
                entry.dtype,
                t.shape()
            )));
        }
        for v in t.iter_mut() {
            let raw: [u8; 4] = payload[offset..offset + 4].try_into().expect("4 bytes");
            *v = f32::from_le_bytes(raw) as f64;
            offset += 4;
        }
    }
    drop(named);
    if offset != payload.len() {
        return Err(corrupt("payload longer than the listed tensors"));
    }
    Ok(params)
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to `path` through a uniquely named sibling temp file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?
        .to_string_lossy()
        .to_string();
    let tmp: PathBuf = dir.join(format!(
        ".{file_name}.tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).at(path)?;
    decode_checkpoint(&bytes)
}

/// SHA-256 of a checkpoint payload as recorded in its manifest.
pub fn checkpoint_digest(bytes: &[u8]) -> Result<String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header = bytes
        .get(8..8 + header_len)
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(header)?;
    Ok(manifest.payload_sha256)
}
