//! Run manifests: what was run, on which inputs, and what it produced.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    /// SHA-256 over `blob <len>\0` followed by the file bytes, as git does.
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash a file, or every file under a directory in name order.
pub fn hash_path(path: &Path) -> anyhow::Result<Vec<FileHash>> {
    let mut out = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for p in entries {
            if p.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                continue;
            }
            out.extend(hash_path(&p)?);
        }
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        out.push(FileHash {
            path: path.display().to_string(),
            sha256: hash_bytes(&bytes),
        });
    }
    Ok(out)
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: &impl Serialize, seeds: Vec<u64>) -> anyhow::Result<Self> {
        Ok(Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config_path: config_path.map(Path::to_path_buf),
            config: serde_json::to_value(config)?,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
        })
    }

    pub fn add_inputs(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.extend(hash_path(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Record the outputs and mark the run finished.
    pub fn finish(&mut self, dir: &Path, outputs: &[&Path], status: &str) -> anyhow::Result<()> {
        for p in outputs {
            if p.exists() {
                self.outputs.extend(hash_path(p)?);
            }
        }
        self.finished_unix = Some(now());
        self.status = status.to_string();
        self.write(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_sha256_objects() {
        // `git hash-object --object-format=sha256` of an empty file.
        assert_eq!(
            hash_bytes(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}
