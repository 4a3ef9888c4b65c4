//! Per-epoch metrics, persisted as one JSON object per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTriple {
    pub mlm: f64,
    pub alignment: f64,
    pub total: f64,
}

impl LossTriple {
    /// `total = mlm + lambda · alignment`.
    pub fn new(mlm: f64, alignment: f64, lambda: f64) -> Self {
        LossTriple {
            mlm,
            alignment,
            total: mlm + lambda * alignment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: u64,
    pub train: LossTriple,
    pub validation: LossTriple,
    pub rankme: f64,
    pub first_component_share: f64,
    pub mean_positive_cosine: f64,
    pub mean_negative_cosine: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&record_line(r)?);
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricsLog { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// One record as a newline-terminated JSON line.
pub fn record_line(record: &EpochRecord) -> Result<String> {
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    Ok(line)
}
