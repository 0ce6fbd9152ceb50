//! Run manifests: everything needed to reproduce a run bit-exactly on the
//! same platform (config echo, seed, version, input digests) plus wall
//! time and the artifact list.

use std::path::{Path, PathBuf};

use crossinit::error::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub version: u32,
    pub command: &'a str,
    pub run_id: &'a str,
    pub tool_version: &'a str,
    pub config: &'a RunConfig,
    pub input_digests: Vec<InputDigest>,
    pub artifacts: Vec<PathBuf>,
    pub wall_time_secs: f64,
}

#[derive(Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

pub fn digest_file(path: &Path) -> Result<InputDigest> {
    let bytes = std::fs::read(path)?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

pub fn digest_literal(label: &str, content: &str) -> InputDigest {
    InputDigest {
        path: label.to_string(),
        sha256: sha256_hex(content.as_bytes()),
    }
}

/// Deterministic run id: first 8 hex digits of the digest of the command
/// name and the resolved config, with file locations excluded so the same
/// parameters give the same id regardless of where inputs and outputs live.
pub fn derive_run_id(command: &str, config: &RunConfig) -> Result<String> {
    if let Some(id) = &config.run_id {
        return Ok(id.clone());
    }
    let mut value = serde_json::to_value(config).map_err(|source| Error::Json {
        path: "<config>".into(),
        source,
    })?;
    if let Some(map) = value.as_object_mut() {
        for key in ["output_dir", "names", "images", "prompts", "run_id"] {
            map.remove(key);
        }
    }
    let canonical = value.to_string();
    Ok(format!(
        "run-{}",
        &sha256_hex(format!("{command}:{canonical}").as_bytes())[..8]
    ))
}

pub fn write_manifest(manifest: &Manifest<'_>, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}
