//! Per-step loss logs as CSV.

use std::fs::{File, OpenOptions};
use std::path::Path;

use idfuse_core::losses::LossReport;

use crate::error::{Error, Result};

pub const LOSS_COLUMNS: [&str; 6] = ["step", "l2", "perceptual", "identity", "wnorm", "total"];

pub struct LossLog {
    writer: csv::Writer<File>,
}

impl LossLog {
    /// Start a fresh log with a header row.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(LOSS_COLUMNS)?;
        Ok(LossLog { writer })
    }

    /// Continue an existing log, or start one if `path` is missing.
    pub fn append(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LossLog {
            writer: csv::Writer::from_writer(file),
        })
    }

    pub fn write(&mut self, step: u64, report: &LossReport) -> Result<()> {
        self.writer.write_record([
            step.to_string(),
            report.l2.to_string(),
            report.perceptual.to_string(),
            report.identity.to_string(),
            report.wnorm.to_string(),
            report.total.to_string(),
        ])?;
        self.writer.flush().map_err(|e| Error::io("<loss log>", e))
    }
}

/// Rows of a loss log: step followed by the five loss columns.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, [f64; 5])>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let bad = || Error::format(path, format!("malformed row {:?}", rec));
        let step = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let mut v = [0.0; 5];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = rec.get(i + 1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        }
        rows.push((step, v));
    }
    Ok(rows)
}
