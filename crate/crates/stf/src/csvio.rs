//! CSV artifacts: metric logs, score tables and plot-ready matrices.
//! Floats use Rust's shortest round-trip formatting, so files reload exactly.

use std::path::Path;

use stf_core::train::EpochLog;
use stf_core::Tensor;

use crate::error::{CliError, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::format(path, e.to_string())
}

pub const METRIC_COLUMNS: [&str; 6] = ["epoch", "lr", "steps", "loss", "train_top1", "eval_top1"];

/// Fixed-column epoch log. `eval_top1` is empty without an eval split.
pub struct MetricLog {
    path: std::path::PathBuf,
    w: csv::Writer<std::fs::File>,
}

impl MetricLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut w = writer(path)?;
        w.write_record(METRIC_COLUMNS)
            .map_err(|e| csv_error(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            w,
        })
    }

    pub fn append(&mut self, log: &EpochLog, eval_top1: Option<f64>) -> Result<()> {
        let row = [
            log.epoch.to_string(),
            log.lr.to_string(),
            log.steps.to_string(),
            log.loss.to_string(),
            log.train_top1.to_string(),
            eval_top1.map_or(String::new(), |v| v.to_string()),
        ];
        self.w
            .write_record(&row)
            .map_err(|e| csv_error(&self.path, e))?;
        self.w.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Rows of `matrix` (rank 2) with `row_label` naming each row's first cell.
pub fn write_matrix(
    path: &Path,
    columns: &[String],
    row_labels: &[String],
    matrix: &Tensor<f64>,
) -> Result<()> {
    let cols = matrix.shape()[1];
    debug_assert_eq!(matrix.rank(), 2);
    let mut w = writer(path)?;
    w.write_record(columns).map_err(|e| csv_error(path, e))?;
    for (label, row) in row_labels.iter().zip(matrix.data().chunks(cols)) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Per-sample class scores: `sample,class0,...`.
pub fn write_scores(path: &Path, samples: &[String], scores: &Tensor<f64>) -> Result<()> {
    let mut columns = vec!["sample".to_string()];
    columns.extend((0..scores.shape()[1]).map(|k| format!("class{k}")));
    write_matrix(path, &columns, samples, scores)
}

/// Reads a matrix written by [`write_matrix`]: row labels and values.
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Tensor<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let width = r.headers().map_err(|e| csv_error(path, e))?.len();
    if width < 2 {
        return Err(CliError::format(
            path,
            "matrix CSV needs a label column and at least one value column",
        ));
    }
    let (mut labels, mut data) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        labels.push(rec[0].to_string());
        for cell in rec.iter().skip(1) {
            let v: f64 = cell.parse().map_err(|_| {
                CliError::format(path, format!("row {}: invalid number '{cell}'", i + 1))
            })?;
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(CliError::format(path, "matrix CSV has no rows"));
    }
    Ok((
        labels.clone(),
        Tensor::from_vec(&[labels.len(), width - 1], data)?,
    ))
}
