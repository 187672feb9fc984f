//! Run directories: lock file, checksummed artifacts and the closing manifest.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub overrides: Vec<String>,
    /// Relative path → SHA-256 of every file the command wrote.
    pub artifacts: BTreeMap<String, String>,
    pub tool_version: String,
    pub created_unix: u64,
}

/// An output directory owned by one command until dropped.
pub struct RunDir {
    root: PathBuf,
    written: Vec<String>,
}

impl RunDir {
    /// Takes the directory's lock and clears any stale manifest.
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(root.join(LOCK_FILE))
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => anyhow!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    root.display(),
                    LOCK_FILE
                ),
                _ => anyhow!("locking {}: {e}", root.display()),
            })?;
        let stale = root.join(MANIFEST_FILE);
        if stale.exists() {
            fs::remove_file(&stale)?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    /// Records a file written by other code under this directory.
    pub fn track(&mut self, rel: &str) {
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
    }

    fn open(&mut self, rel: &str) -> Result<BufWriter<File>> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.track(rel);
        Ok(BufWriter::new(
            File::create(&path).with_context(|| format!("writing {}", path.display()))?,
        ))
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut out = self.open(rel)?;
        serde_json::to_writer_pretty(&mut out, value)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, rel: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut out = self.open(rel)?;
        for row in rows {
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_csv<T: Serialize>(&mut self, rel: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let out = self.open(rel)?;
        let mut w = csv::Writer::from_writer(out);
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Hashes every tracked file and writes the manifest last.
    pub fn finish(mut self, command: &str, config_path: Option<&Path>, seeds: Vec<u64>, overrides: Vec<String>) -> Result<RunManifest> {
        let mut artifacts = BTreeMap::new();
        self.written.sort();
        for rel in &self.written {
            let bytes = fs::read(self.root.join(rel))?;
            artifacts.insert(rel.clone(), hex::encode(Sha256::digest(&bytes)));
        }
        let manifest = RunManifest {
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            seeds,
            output_dir: self.root.display().to_string(),
            overrides,
            artifacts,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.root.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}
