//! JSON-lines metrics, one record per line, append-only.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    /// Seconds since the run started; excluded from determinism checks.
    pub wall_clock: f64,
}

impl MetricsRecord {
    /// The record as JSON without its timestamp.
    pub fn payload(&self) -> String {
        let mut v = serde_json::to_value(self).expect("record serializes");
        v.as_object_mut().expect("object").remove("wall_clock");
        v.to_string()
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    /// Opens `path` for appending, creating parent directories.
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).with_context(|| format!("opening {}", path.display()))?;
        Ok(Self { path, file })
    }

    /// Truncates `path` first.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Self::append(path)
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(r)?)?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Concatenated timestamp-free payloads, one per line.
pub fn payloads(records: &[MetricsRecord]) -> String {
    records.iter().map(|r| r.payload() + "\n").collect()
}
