//! Run manifests with content hashes of inputs and outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Path relative to the hashed root (or as given, for single files).
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub run_id: String,
    /// Command-line arguments after the program name.
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest_bytes(&bytes))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Digests of every file under `root` (or of `root` itself if it is a file), sorted by path.
///
/// The manifest file itself is skipped.
pub fn digest_tree(root: &Path) -> Result<Vec<FileDigest>> {
    if root.is_file() {
        return Ok(vec![FileDigest {
            path: root.display().to_string(),
            sha256: digest_file(root)?,
        }]);
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .map(|p| {
            let rel = p.strip_prefix(root).expect("walked from root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Ok(FileDigest {
                path: rel,
                sha256: digest_file(&p)?,
            })
        })
        .collect()
}

impl ExperimentManifest {
    pub fn new(command: Vec<String>, config: serde_json::Value, seeds: BTreeMap<String, u64>, inputs: Vec<FileDigest>, outputs: Vec<FileDigest>) -> Result<Self> {
        let id_source = serde_json::to_vec(&(&command, &config))?;
        Ok(Self {
            run_id: digest_bytes(&id_source)[..16].to_string(),
            command,
            config,
            seeds,
            inputs,
            outputs,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Output digests that differ from (or are missing in) `other`.
    pub fn output_mismatches(&self, other: &[FileDigest]) -> Vec<String> {
        let theirs: BTreeMap<&str, &str> = other.iter().map(|d| (d.path.as_str(), d.sha256.as_str())).collect();
        let mut bad: Vec<String> = self
            .outputs
            .iter()
            .filter(|d| theirs.get(d.path.as_str()) != Some(&d.sha256.as_str()))
            .map(|d| d.path.clone())
            .collect();
        let ours: std::collections::BTreeSet<&str> = self.outputs.iter().map(|d| d.path.as_str()).collect();
        bad.extend(other.iter().filter(|d| !ours.contains(d.path.as_str())).map(|d| d.path.clone()));
        bad
    }
}
