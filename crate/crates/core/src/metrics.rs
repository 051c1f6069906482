//! Training/evaluation metrics as JSON lines.
//!
//! The metrics log is part of the determinism contract: a seeded run must
//! reproduce it byte for byte. Rows therefore hold only step counters and
//! named scalars in sorted order, never timestamps. Wall-clock numbers go
//! to a separate timing sidecar that makes no reproducibility promise.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    /// BTreeMap keeps key order sorted, which keeps serialization stable.
    pub values: BTreeMap<String, f64>,
}

impl MetricsRow {
    pub fn new(step: u64) -> Self {
        MetricsRow {
            step,
            values: BTreeMap::new(),
        }
    }

    pub fn set(mut self, name: &str, value: f64) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

fn row_to_line(row: &MetricsRow) -> Result<String> {
    serde_json::to_string(row)
        .map_err(|e| CoreError::DataFormat(format!("metrics serialization: {}", e)))
}

/// Streams rows to `<path>` as one JSON object per line.
#[derive(Debug)]
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let line = row_to_line(row)?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for row in rows {
        w.append(row)?;
    }
    w.finish()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: MetricsRow = serde_json::from_str(&line)
            .map_err(|e| CoreError::DataFormat(format!("metrics line {}: {}", i + 1, e)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Wall-clock sidecar (`timing.jsonl` next to the metrics log). Contents
/// vary run to run by design; nothing downstream may depend on them.
#[derive(Debug)]
pub struct TimingWriter {
    out: BufWriter<File>,
    start: Instant,
}

#[derive(Debug, Serialize, Deserialize)]
struct TimingRow {
    step: u64,
    wall_ms: u64,
}

impl TimingWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(TimingWriter {
            out: BufWriter::new(File::create(path)?),
            start: Instant::now(),
        })
    }

    pub fn mark(&mut self, step: u64) -> Result<()> {
        let row = TimingRow {
            step,
            wall_ms: self.start.elapsed().as_millis() as u64,
        };
        let line = serde_json::to_string(&row)
            .map_err(|e| CoreError::DataFormat(format!("timing serialization: {}", e)))?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
