//! Reproducibility manifests. Every pipeline artifact gets a sidecar
//! `<artifact>.manifest.json` recording the effective config hash, the
//! stage seed and a digest of each input, so reruns can be checked for
//! drift byte-by-byte. Manifests carry no timestamps on purpose.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn sha256_file(path: &FsPath) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::MissingArtifact {
        path: path.display().to_string(),
        hint: e.to_string(),
    })?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Producing stage (`preprocess`, `sample`, ...).
    pub stage: String,
    /// Base name of the artifact this sidecar describes.
    pub artifact: String,
    /// Digest of the effective run configuration (env overrides applied).
    pub config_sha256: String,
    /// Seed the stage ran with.
    pub seed: u64,
    /// Input label -> content digest.
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, artifact: &FsPath, config_text: &str, seed: u64) -> Manifest {
        Manifest {
            stage: stage.to_string(),
            artifact: artifact
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed,
            inputs: BTreeMap::new(),
        }
    }

    /// Hash `path` and record it under `label`.
    pub fn add_input(&mut self, label: &str, path: &FsPath) -> Result<()> {
        self.inputs.insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Record an already-computed digest (e.g. an in-memory structure).
    pub fn add_digest(&mut self, label: &str, digest: &str) {
        self.inputs.insert(label.to_string(), digest.to_string());
    }

    /// Write `<artifact>.manifest.json` next to the artifact.
    pub fn write_beside(&self, artifact: &FsPath) -> Result<PathBuf> {
        let path = sidecar_path(artifact);
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        fs::write(&path, json + "\n")?;
        Ok(path)
    }

    pub fn read(path: &FsPath) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingArtifact {
            path: path.display().to_string(),
            hint: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("manifest `{}` is not valid JSON: {e}", path.display()))
        })
    }
}

pub fn sidecar_path(artifact: &FsPath) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".manifest.json");
    artifact.with_file_name(name)
}
