use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::EpochStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_halt: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub mean_q: f64,
    pub supervision_steps_used: f64,
    pub wall_seconds: f64,
}

impl MetricRecord {
    pub fn new(epoch: usize, split: Split, s: &EpochStats) -> Self {
        MetricRecord {
            epoch,
            split,
            loss_total: s.loss_total,
            loss_cls: s.loss_cls,
            loss_halt: s.loss_halt,
            accuracy: s.accuracy,
            lr: s.lr,
            mean_q: s.mean_q,
            supervision_steps_used: s.supervision_steps_used,
            wall_seconds: s.wall_seconds,
        }
    }
}

/// Append-only line-delimited JSON log; each record is flushed as written.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            file: OpenOptions::new().create(true).append(true).open(path)?,
        })
    }

    pub fn write(&mut self, record: &MetricRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(|e| Error::Validation(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(|e| Error::Validation(format!("metrics line: {e}"))))
        .collect()
}
