//! Run manifests: resolved config plus SHA-256 digests of produced artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::Cfg;

/// Records files written by the running command so that a runtime failure
/// can remove partial artifacts, and the manifest can digest them.
pub struct ArtifactTracker {
    paths: Vec<PathBuf>,
}

impl ArtifactTracker {
    pub fn new() -> Self {
        ArtifactTracker { paths: Vec::new() }
    }

    /// Register a file some library call already wrote.
    pub fn note(&mut self, path: &Path) {
        self.paths.push(path.to_path_buf());
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.note(path);
        Ok(())
    }

    /// `<artifact>.suffix` next to an artifact path.
    pub fn sibling(&self, path: &Path, suffix: &str) -> PathBuf {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".");
        name.push(suffix);
        path.with_file_name(name)
    }

    pub fn remove_all(&self) {
        for p in &self.paths {
            let _ = fs::remove_file(p);
        }
    }

    fn digests(&self) -> Result<Vec<Value>> {
        let mut entries: Vec<(String, String)> = self
            .paths
            .iter()
            .map(|p| {
                let bytes = fs::read(p).with_context(|| format!("digesting {}", p.display()))?;
                Ok((p.display().to_string(), hex(&Sha256::digest(&bytes))))
            })
            .collect::<Result<_>>()?;
        entries.sort();
        Ok(entries
            .into_iter()
            .map(|(path, sha256)| json!({ "path": path, "sha256": sha256 }))
            .collect())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write the manifest itself (it is not tracked: it describes the run).
pub fn write(path: &Path, command: &str, cfg: &Cfg, tracker: &ArtifactTracker) -> Result<()> {
    let mut config = Map::new();
    for (k, v) in cfg.resolved() {
        config.insert(k, Value::String(v));
    }
    let doc = json!({
        "command": command,
        "config": Value::Object(config),
        "artifacts": tracker.digests()?,
    });
    fs::write(path, serde_json::to_string_pretty(&doc).expect("manifest serializes") + "\n")
        .with_context(|| format!("writing {}", path.display()))
}
