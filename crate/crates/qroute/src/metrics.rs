//! Training metrics CSV.
//!
//! `metrics.csv` holds one row per epoch (`batch = -1`), `batch_metrics.csv`
//! one row per batch (0-based `batch`); both share the header below.
//! `epoch` is 1-based and `seconds` is the wall time of the row's epoch or
//! batch.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use qroute_core::trainer::{BatchMetrics, EpochMetrics};

use crate::{Error, Result};

pub const HEADER: &str = "epoch,batch,mean_cost,baseline_mean_cost,win_fraction,lr,seconds";
pub const EPOCH_FILE: &str = "metrics.csv";
pub const BATCH_FILE: &str = "batch_metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub batch: i64,
    pub mean_cost: f64,
    pub baseline_mean_cost: f64,
    pub win_fraction: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn epoch(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            batch: -1,
            mean_cost: m.mean_cost,
            baseline_mean_cost: m.baseline_mean_cost,
            win_fraction: m.win_fraction,
            lr: m.lr,
            seconds: m.seconds,
        }
    }

    pub fn batch(m: &BatchMetrics, seconds: f64) -> Self {
        Self {
            epoch: m.epoch,
            batch: m.batch as i64,
            mean_cost: m.mean_cost,
            baseline_mean_cost: m.baseline_mean_cost,
            win_fraction: m.wins as f64 / m.episodes as f64,
            lr: m.lr,
            seconds,
        }
    }
}

/// Appends rows to a metrics file, writing the header if the file is new.
pub struct MetricsWriter {
    inner: csv::Writer<std::fs::File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(Error::io(path))?;
        if fresh {
            writeln!(file, "{HEADER}").map_err(Error::io(path))?;
        }
        let inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner
            .serialize(row)
            .and_then(|_| self.inner.flush().map_err(csv::Error::from))
            .map_err(|e| Error::Usage(format!("writing metrics: {e}")))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Long-format CSV (`epoch,batch,metric,value`) of a run directory's epoch
/// and batch rows, epoch rows first.
pub fn export_tidy(run_dir: &Path) -> Result<String> {
    let mut rows = read_metrics(&run_dir.join(EPOCH_FILE))?;
    let batches = run_dir.join(BATCH_FILE);
    if batches.exists() {
        rows.extend(read_metrics(&batches)?);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Usage(format!("writing tidy metrics: {e}"));
    w.write_record(["epoch", "batch", "metric", "value"]).map_err(io)?;
    for r in &rows {
        for (name, v) in [
            ("mean_cost", r.mean_cost),
            ("baseline_mean_cost", r.baseline_mean_cost),
            ("win_fraction", r.win_fraction),
            ("lr", r.lr),
            ("seconds", r.seconds),
        ] {
            w.write_record([r.epoch.to_string(), r.batch.to_string(), name.into(), v.to_string()])
                .map_err(io)?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Usage(e.to_string()))?).expect("csv is utf-8"))
}
