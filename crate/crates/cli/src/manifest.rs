//! Run manifests and output hashing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub config: serde_json::Value,
    pub inputs: Vec<FileEntry>,
    /// Sorted by name.
    pub outputs: Vec<FileEntry>,
    pub runtime_seconds: f64,
}

pub fn hash_file(path: &Path) -> CliResult<FileEntry> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(FileEntry {
        name: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        bytes: bytes.len() as u64,
    })
}

/// Collects the files a command wrote into its output directory.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes a file through `fill` and records it.
    pub fn write_with<F>(&mut self, name: &str, fill: F) -> CliResult<()>
    where
        F: FnOnce(&mut Vec<u8>) -> meterflow::Result<()>,
    {
        let mut buf = Vec::new();
        fill(&mut buf).map_err(|e| CliError::io(&self.path(name), e))?;
        self.write_bytes(name, &buf)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(&self.path(name), e))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Hashes every written file and writes the manifest.
    pub fn finish(mut self, mut manifest: RunManifest) -> CliResult<RunManifest> {
        self.written.sort();
        manifest.outputs = self
            .written
            .iter()
            .map(|name| hash_file(&self.path(name)))
            .collect::<CliResult<_>>()?;
        let path = self.path(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::io(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

/// Re-hashes the outputs listed in `dir`'s manifest. Returns the names
/// whose content no longer matches.
pub fn verify(dir: &Path) -> CliResult<Vec<String>> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::io(&path, e))?;
    let mut mismatched = Vec::new();
    for entry in &manifest.outputs {
        let file = dir.join(&entry.name);
        match hash_file(&file) {
            Ok(now) if now == *entry => {}
            _ => mismatched.push(entry.name.clone()),
        }
    }
    Ok(mismatched)
}
