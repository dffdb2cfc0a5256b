//! CSV files of a run directory. Column order is fixed; numbers use the
//! shortest decimal that round-trips, except `overlap.csv` which uses nine
//! significant digits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::overlap::OverlapRecord;

pub const METRICS_HEADER: [&str; 7] = [
    "epoch",
    "step",
    "train_loss",
    "train_acc",
    "val_loss",
    "val_acc",
    "global_grad_norm",
];
pub const OVERLAP_HEADER: [&str; 7] = [
    "step",
    "block",
    "skip_norm",
    "branch_norm",
    "total_norm",
    "cosine",
    "amplification",
];
pub const GRADSTATS_HEADER: [&str; 6] = ["step", "stage", "path", "mean", "std", "l2norm"];
pub const TIMING_HEADER: [&str; 3] = ["epoch", "step", "wallclock_s"];

/// One epoch of training. Train figures average the epoch's minibatches;
/// validation figures are absent when the run has no validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Mean over the epoch of the pre-transform global gradient norm.
    pub global_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradStatRecord {
    pub step: u64,
    /// `raw` (from backpropagation) or `transformed` (what the optimizer got).
    pub stage: String,
    pub path: String,
    pub mean: f64,
    pub std: f64,
    pub l2norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub epoch: usize,
    pub step: u64,
    pub wallclock_s: f64,
}

/// Shortest round-trip decimal.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Nine significant digits, `%.9g` style: fixed notation for decimal
/// exponents in `-5..9`, scientific otherwise, trailing zeros removed.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// A CSV file written row by row and flushed after each row, so the file is
/// complete up to the last row even when a run aborts.
pub struct CsvSink {
    inner: csv::Writer<BufWriter<File>>,
    path: String,
}

impl CsvSink {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut sink = CsvSink {
            inner: csv::Writer::from_writer(BufWriter::new(file)),
            path: path.display().to_string(),
        };
        sink.write(header.iter().map(|s| s.to_string()))?;
        Ok(sink)
    }

    fn write(&mut self, fields: impl IntoIterator<Item = String>) -> Result<()> {
        let path = &self.path;
        self.inner
            .write_record(fields)
            .map_err(|e| Error::io(path.clone(), e.into()))?;
        self.inner.flush().map_err(|e| Error::io(path.clone(), e))
    }

    pub fn metric(&mut self, r: &MetricRow) -> Result<()> {
        self.write([
            r.epoch.to_string(),
            r.step.to_string(),
            fmt_f64(r.train_loss),
            fmt_f64(r.train_acc),
            opt(r.val_loss),
            opt(r.val_acc),
            fmt_f64(r.global_grad_norm),
        ])
    }

    pub fn overlap(&mut self, r: &OverlapRecord) -> Result<()> {
        self.write([
            r.step.to_string(),
            r.block.clone(),
            fmt_sig9(r.skip_norm),
            fmt_sig9(r.branch_norm),
            fmt_sig9(r.total_norm),
            fmt_sig9(r.cosine),
            fmt_sig9(r.amplification),
        ])
    }

    pub fn gradstat(&mut self, r: &GradStatRecord) -> Result<()> {
        self.write([
            r.step.to_string(),
            r.stage.clone(),
            r.path.clone(),
            fmt_f64(r.mean),
            fmt_f64(r.std),
            fmt_f64(r.l2norm),
        ])
    }

    pub fn timing(&mut self, r: &TimingRow) -> Result<()> {
        self.write([r.epoch.to_string(), r.step.to_string(), fmt_f64(r.wallclock_s)])
    }

    pub fn raw(&mut self, fields: &[String]) -> Result<()> {
        self.write(fields.iter().cloned())
    }
}

/// Reads every row of a CSV file with a header.
pub fn read_rows<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let ctx = || path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::io(ctx(), e.into()))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| Error::io(ctx(), e.into())))
        .collect()
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}
