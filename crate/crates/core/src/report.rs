//! Run artifacts: CSV emission, check reports, and the per-run record with a
//! hashed file manifest.
//!
//! All numeric formatting goes through [`fmt_f64`], which prints the shortest
//! string that round-trips the exact value. Reruns with the same config and
//! seed therefore produce byte-identical files.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Shortest round-trip decimal form of a float (Rust's default float Display).
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Write a CSV file with the given header and rows.
pub fn write_csv<P: AsRef<Path>>(
    path: P,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::InvalidInput(format!(
                "csv row width {} does not match header width {}",
                row.len(),
                header.len()
            )));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// One named check with its measured value and decision threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckRecord {
    /// Pass when value <= threshold.
    pub fn upper(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        CheckRecord {
            name: name.into(),
            value,
            threshold,
            pass: value.is_finite() && value <= threshold,
        }
    }

    /// Pass when value >= threshold.
    pub fn lower(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        CheckRecord {
            name: name.into(),
            value,
            threshold,
            pass: value.is_finite() && value >= threshold,
        }
    }
}

/// The `verify` command's output: every check by name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OracleReport {
    pub checks: Vec<CheckRecord>,
}

impl OracleReport {
    pub fn push(&mut self, check: CheckRecord) {
        self.checks.push(check);
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failed(&self) -> Vec<&CheckRecord> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// One immutable record per run: what ran, with what inputs, what came out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Verbatim config file content (empty when none was given).
    pub config_text: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub metrics: serde_json::Map<String, serde_json::Value>,
    pub files: Vec<FileEntry>,
}

/// Collects outputs for a run directory and finalizes the record.
pub struct RunWriter {
    out_dir: PathBuf,
    record: RunRecord,
    started: SystemTime,
}

impl RunWriter {
    pub fn create(out_dir: &Path, command: &str, seed: u64, config_text: &str) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        let started = SystemTime::now();
        Ok(RunWriter {
            out_dir: out_dir.to_path_buf(),
            record: RunRecord {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                config_text: config_text.to_string(),
                started_unix: started
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                wall_clock_seconds: 0.0,
                metrics: serde_json::Map::new(),
                files: Vec::new(),
            },
            started,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Record an emitted file in the manifest (hashing its current content).
    pub fn track(&mut self, name: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        let data = fs::read(&path)?;
        let mut hasher = Sha256::new();
        hasher.update(&data);
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = std::fmt::Write::write_fmt(&mut hex, format_args!("{byte:02x}"));
        }
        self.record.files.push(FileEntry {
            path: name.to_string(),
            bytes: data.len() as u64,
            sha256: hex,
        });
        Ok(())
    }

    pub fn metric(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.record.metrics.insert(key.to_string(), value.into());
    }

    pub fn metric_f64(&mut self, key: &str, value: f64) {
        let v = serde_json::Number::from_f64(value)
            .map(serde_json::Value::Number)
            .unwrap_or(serde_json::Value::Null);
        self.record.metrics.insert(key.to_string(), v);
    }

    /// Write `run_record.json` and return the finished record.
    pub fn finish(mut self) -> Result<RunRecord> {
        self.record.wall_clock_seconds = self
            .started
            .elapsed()
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let path = self.out_dir.join("run_record.json");
        let text = serde_json::to_string_pretty(&self.record)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let mut f = fs::File::create(path)?;
        f.write_all(text.as_bytes())?;
        Ok(self.record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = || {
            vec![
                vec!["0".to_string(), fmt_f64(0.1 + 0.2)],
                vec!["1".to_string(), fmt_f64(1.0 / 3.0)],
            ]
        };
        write_csv(&path, &["idx", "value"], rows()).unwrap();
        let first = fs::read(&path).unwrap();
        write_csv(&path, &["idx", "value"], rows()).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
        let text = String::from_utf8(first).unwrap();
        assert!(text.starts_with("idx,value\n"));
        // shortest round-trip representation, parse back exactly
        for line in text.lines().skip(1) {
            let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert!(v == 0.1 + 0.2 || v == 1.0 / 3.0);
        }
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let err = write_csv(&path, &["a", "b"], vec![vec!["1".to_string()]]).unwrap_err();
        assert!(format!("{err}").contains("width"));
    }

    #[test]
    fn check_record_directions() {
        assert!(CheckRecord::upper("u", 1e-10, 1e-9).pass);
        assert!(!CheckRecord::upper("u", 1e-8, 1e-9).pass);
        assert!(CheckRecord::lower("l", 0.5, 0.1).pass);
        assert!(!CheckRecord::lower("l", f64::NAN, 0.1).pass);
    }

    #[test]
    fn run_record_tracks_files_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = RunWriter::create(dir.path(), "verify", 7, "[train]\n").unwrap();
        fs::write(w.path("out.csv"), b"a,b\n1,2\n").unwrap();
        w.track("out.csv").unwrap();
        w.metric_f64("ks", 0.031);
        let record = w.finish().unwrap();
        assert_eq!(record.files.len(), 1);
        assert_eq!(record.files[0].bytes, 8);
        assert_eq!(
            record.files[0].sha256.len(),
            64,
            "sha256 hex digest expected"
        );
        let loaded: RunRecord = serde_json::from_str(
            &fs::read_to_string(dir.path().join("run_record.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(loaded.command, "verify");
        assert_eq!(loaded.seed, 7);
        assert!(loaded.metrics.contains_key("ks"));
    }
}
