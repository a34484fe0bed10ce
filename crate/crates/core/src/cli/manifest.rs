//! Run manifests: resolved configuration, version, seed, timestamps and a
//! SHA-256 digest of every emitted file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<OutputEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Writes files under one directory and remembers their digests.
pub struct ArtifactWriter {
    root: PathBuf,
    started: u64,
    outputs: Vec<OutputEntry>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), started: unix_now(), outputs: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Write `bytes` to `rel` (relative to the root), creating parent directories.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.outputs.retain(|o| o.path != rel);
        self.outputs.push(OutputEntry { path: rel.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    /// Write the manifest to `name`, then re-read every listed output and
    /// check its digest.
    pub fn finish(self, name: &str, command: &str, seed: u64, config: BTreeMap<String, String>) -> Result<RunManifest> {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            started_unix: self.started,
            finished_unix: unix_now(),
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.root.join(name), text)?;
        verify_outputs(&self.root, &manifest)?;
        Ok(manifest)
    }
}

/// Check every output listed in `manifest` against its recorded digest.
pub fn verify_outputs(root: &Path, manifest: &RunManifest) -> Result<()> {
    for o in &manifest.outputs {
        let bytes = std::fs::read(root.join(&o.path))
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", o.path)))?;
        if sha256_hex(&bytes) != o.sha256 || bytes.len() as u64 != o.bytes {
            return Err(Error::Data(format!("digest mismatch for {}", o.path)));
        }
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}
