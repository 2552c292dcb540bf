//! Atomic file writes and the per-directory run manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use firmweb::SimConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

/// Writes through a temp file in the target directory, then renames, so a
/// reader never sees a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| CliError::Domain(format!("writing {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

pub fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Domain(format!("creating {}: {e}", dir.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl InputRecord {
    pub fn new(role: &str, path: &Path, bytes: &[u8]) -> Self {
        Self {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub inputs: Vec<InputRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SimConfig>,
    pub started_at: String,
    pub finished_at: String,
    /// `ok`, `numerical_failure` or `error`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default)]
    pub nodes: Vec<String>,
    #[serde(default)]
    pub node_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity_horizon: Option<f64>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl Manifest {
    pub fn new(command: &str, inputs: Vec<InputRecord>, started: DateTime<Utc>) -> Self {
        Self {
            tool: "firmweb".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            inputs,
            config: None,
            started_at: stamp(started),
            finished_at: String::new(),
            status: "ok".into(),
            note: None,
            nodes: Vec::new(),
            node_names: Vec::new(),
            samples: None,
            validity_horizon: None,
            outputs: Vec::new(),
        }
    }

    pub fn write(mut self, dir: &Path) -> CliResult {
        self.finished_at = stamp(Utc::now());
        let mut s = serde_json::to_string_pretty(&self).expect("manifest serialises");
        s.push('\n');
        write_atomic(&dir.join(MANIFEST), s.as_bytes())
    }

    /// The manifest in `dir`, if there is a readable one.
    pub fn read(dir: &Path) -> Option<Self> {
        let bytes = fs::read(dir.join(MANIFEST)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }
}
