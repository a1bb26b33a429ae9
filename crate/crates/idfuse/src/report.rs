//! Metrics tables: CSV plus an aligned text table with direction markers.

use std::path::{Path, PathBuf};

use idfuse_core::metrics::MetricsRow;

use crate::error::{Error, Result};

pub const METRIC_COLUMNS: [&str; 5] = ["tag", "n_samples", "lpips", "idsim", "fid"];

/// Header and rows of the text table, lower-is-better marked with `↓`.
pub fn text_table(rows: &[MetricsRow]) -> String {
    let header = ["tag", "n_samples", "LPIPS↓", "IDSIM↑", "FID↓"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.tag.clone(),
                r.n_samples.to_string(),
                format!("{:.4}", r.lpips),
                format!("{:.4}", r.idsim),
                format!("{:.4}", r.fid),
            ]
        })
        .collect();
    let width = |i: usize| {
        cells
            .iter()
            .map(|c| c[i].chars().count())
            .chain([header[i].chars().count()])
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..5).map(width).collect();
    let line = |vals: [&str; 5]| {
        let mut s = format!("{:<w$}", vals[0], w = widths[0]);
        for i in 1..5 {
            let pad = widths[i] - vals[i].chars().count();
            s.push_str("  ");
            s.push_str(&" ".repeat(pad));
            s.push_str(vals[i]);
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    for c in &cells {
        out.push_str(&line([&c[0], &c[1], &c[2], &c[3], &c[4]]));
    }
    out
}

/// Write `csv_path` and a `.txt` table beside it; returns the text path.
pub fn write_metrics(rows: &[MetricsRow], csv_path: &Path) -> Result<PathBuf> {
    if rows.is_empty() {
        return Err(Error::format(csv_path, "no metrics rows to report"));
    }
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.tag.clone(),
            r.n_samples.to_string(),
            r.lpips.to_string(),
            r.idsim.to_string(),
            r.fid.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let txt = csv_path.with_extension("txt");
    std::fs::write(&txt, text_table(rows)).map_err(|e| Error::io(&txt, e))?;
    Ok(txt)
}

pub fn read_metrics(csv_path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let bad = || Error::format(csv_path, format!("malformed row {:?}", rec));
        let num = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad);
        rows.push(MetricsRow {
            tag: rec.get(0).ok_or_else(bad)?.to_string(),
            n_samples: rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            lpips: num(2)?,
            idsim: num(3)?,
            fid: num(4)?,
        });
    }
    Ok(rows)
}
