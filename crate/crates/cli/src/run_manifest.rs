//! Provenance for every command output.
//!
//! A run manifest lists the command, its settings and a SHA-256 of each
//! input. Its digest covers only those fields, never paths or clocks, so
//! the same inputs and settings always give the same digest. Outputs embed
//! the digest; the full manifest with absolute paths and a timestamp is
//! written next to them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Files above this size are fingerprinted from their size and both ends.
const FULL_HASH_LIMIT: u64 = 256 << 20;
const SAMPLE_BYTES: u64 = 4 << 20;

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub name: String,
    pub sha256: String,
    /// `full` or `sampled`.
    pub mode: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub settings: BTreeMap<String, String>,
    pub inputs: Vec<InputDigest>,
    #[serde(skip)]
    paths: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    #[serde(flatten)]
    manifest: &'a RunManifest,
    digest: String,
    input_paths: Vec<String>,
    created_unix: u64,
}

fn hash_file(path: &Path) -> Result<(String, &'static str)> {
    let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let len = file.metadata()?.len();
    let mut hasher = Sha256::new();
    let mode = if len <= FULL_HASH_LIMIT {
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        "full"
    } else {
        hasher.update(len.to_le_bytes());
        let mut buf = vec![0u8; SAMPLE_BYTES as usize];
        file.read_exact(&mut buf)?;
        hasher.update(&buf);
        file.seek(SeekFrom::Start(len - SAMPLE_BYTES))?;
        file.read_exact(&mut buf)?;
        hasher.update(&buf);
        "sampled"
    };
    Ok((hex::encode(hasher.finalize()), mode))
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            settings: BTreeMap::new(),
            inputs: Vec::new(),
            paths: Vec::new(),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.settings.insert(key.to_string(), value.to_string());
        self
    }

    /// Record an input file under `name`, which should not depend on where
    /// the file lives.
    pub fn input_as(&mut self, name: String, path: &Path) -> Result<&mut Self> {
        let (sha256, mode) = hash_file(path)?;
        self.inputs.push(InputDigest { name, sha256, mode });
        self.paths.push(std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf()));
        Ok(self)
    }

    /// Record an input file under its file name.
    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.input_as(name, path)
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Write the manifest with paths and a timestamp to `path`.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let sidecar = Sidecar {
            manifest: self,
            digest: self.digest(),
            input_paths: self.paths.iter().map(|p| p.display().to_string()).collect(),
            created_unix,
        };
        let mut text = serde_json::to_string_pretty(&sidecar)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Sidecar location for an output file or directory.
pub fn sidecar_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("run_manifest.json")
    } else {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }
}
