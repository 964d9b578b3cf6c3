//! Artifact persistence: CSV and JSON writers with a configuration-hash
//! header, content checksums, and the per-run report.
//!
//! Determinism contract: for a fixed configuration and seed, every data
//! artifact is byte-identical across runs. Wall-clock timings are therefore
//! confined to the run report, which is the one file exempt from the
//! byte-identity guarantee; its manifest checksums still agree.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Shortest round-trip decimal formatting; the same value always prints the
/// same bytes.
pub fn fmt_float(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-4 || v.abs() >= 1e15) {
        format!("{v:e}")
    } else if v == v.trunc() {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Writes a CSV artifact: a `# config_hash=<hex>` line, the column header,
/// then the rows; comma separators, LF endings. Returns the content checksum.
pub fn write_csv(
    path: &Path,
    config_hash: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<String> {
    let mut text = String::new();
    text.push_str(&format!("# config_hash={config_hash}\n"));
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Contract("csv row width does not match header".into()));
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Writes a JSON artifact with sorted keys and the configuration hash
/// injected at the top level. Returns the content checksum.
pub fn write_json(path: &Path, config_hash: &str, value: &serde_json::Value) -> Result<String> {
    let mut root = match value {
        serde_json::Value::Object(map) => map.clone(),
        other => {
            let mut m = serde_json::Map::new();
            m.insert("data".into(), other.clone());
            m
        }
    };
    root.insert("config_hash".into(), serde_json::Value::String(config_hash.into()));
    // BTreeMap rewrites the object with sorted keys at every nesting level.
    fn sort(v: serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(map) => {
                let sorted: BTreeMap<String, serde_json::Value> =
                    map.into_iter().map(|(k, val)| (k, sort(val))).collect();
                serde_json::Value::Object(sorted.into_iter().collect())
            }
            serde_json::Value::Array(items) => {
                serde_json::Value::Array(items.into_iter().map(sort).collect())
            }
            other => other,
        }
    }
    let sorted = sort(serde_json::Value::Object(root));
    let mut text = serde_json::to_string_pretty(&sorted)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
}

/// Summary of one CLI run: what was computed, how long it took, what was
/// written and with which checksums.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config_hash: String,
    pub subcommand: String,
    pub seed: u64,
    pub norms: BTreeMap<String, f64>,
    pub iterations: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
    pub manifest: Vec<ArtifactEntry>,
    /// Seconds per operation; not covered by the determinism guarantee.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn new(config_hash: &str, subcommand: &str, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            subcommand: subcommand.into(),
            seed,
            norms: BTreeMap::new(),
            iterations: BTreeMap::new(),
            warnings: Vec::new(),
            manifest: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn norm(&mut self, key: &str, value: f64) {
        self.norms.insert(key.into(), value);
    }

    pub fn iterations(&mut self, key: &str, value: usize) {
        self.iterations.insert(key.into(), value as u64);
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    pub fn timing(&mut self, key: &str, seconds: f64) {
        self.timings.insert(key.into(), seconds);
    }

    pub fn artifact(&mut self, path: &Path, checksum: String) {
        let file = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.manifest.push(ArtifactEntry { file, sha256: checksum });
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("run_report.json");
        let value = serde_json::to_value(self)?;
        write_json(&path, &self.config_hash, &value)?;
        Ok(path)
    }
}
