//! Metric reports.
//!
//! A report prints as a flat `key=value` block and appends to a record file
//! with one line per metric:
//! `metric=acc value=0.964 seed=3 config=1f0c...`.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Result, RmlError};

/// First 16 hex digits of the SHA-256 of the JSON form of `config`.
pub fn config_hash<C: Serialize + ?Sized>(config: &C) -> Result<String> {
    let json = serde_json::to_vec(config)
        .map_err(|e| RmlError::Config(format!("config serialization: {e}")))?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub seed: u64,
    pub config_hash: String,
    pub metrics: Vec<(String, f64)>,
}

impl Report {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            seed,
            config_hash: config_hash.into(),
            metrics: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) -> &mut Self {
        self.metrics.push((name.into(), value));
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn record_lines(&self) -> Vec<String> {
        self.metrics
            .iter()
            .map(|(n, v)| format!("metric={n} value={v} seed={} config={}", self.seed, self.config_hash))
            .collect()
    }

    /// Appends the record lines to `path`, creating it if needed.
    pub fn append_records(&self, path: &Path) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| RmlError::io(path, e))?;
        for line in self.record_lines() {
            writeln!(f, "{line}").map_err(|e| RmlError::io(path, e))?;
        }
        Ok(())
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, v) in &self.metrics {
            writeln!(f, "{n}={v}")?;
        }
        writeln!(f, "seed={}", self.seed)?;
        write!(f, "config={}", self.config_hash)
    }
}
