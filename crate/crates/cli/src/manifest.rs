//! Run manifests: what was run, with which flags, and what it produced.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub crc32: String,
}

impl FileEntry {
    /// Describe `path`; `shown` is the path recorded in the manifest.
    pub fn of(path: &Path, shown: impl Into<String>) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(FileEntry { path: shown.into(), bytes: bytes.len() as u64, crc32: format!("{:08x}", crc32fast::hash(&bytes)) })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub flags: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub tool_version: String,
    pub started_at: String,
}

impl RunManifest {
    pub fn new(subcommand: &str, flags: &impl Serialize, seeds: Vec<u64>, started_at: chrono::DateTime<chrono::Utc>) -> Result<Self> {
        Ok(RunManifest {
            subcommand: subcommand.to_string(),
            flags: serde_json::to_value(flags)?,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: started_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileEntry::of(path, path.display().to_string())?);
        Ok(())
    }

    /// Record an output; its path is stored relative to `base` when inside it.
    pub fn output(&mut self, path: &Path, base: &Path) -> Result<()> {
        let shown = path.strip_prefix(base).unwrap_or(path);
        self.outputs.push(FileEntry::of(path, shown.display().to_string())?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| crate::error::data(format!("manifest {}: {e}", path.display())))
    }
}

/// Manifest path for a single-file output: `report.json` → `report.json.manifest.json`.
pub fn beside(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Write a single output file and its manifest.
pub fn write_with_manifest(path: &Path, contents: &str, mut manifest: RunManifest) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    manifest.output(path, base)?;
    manifest.write(&beside(path))
}
