use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::csvio::{fmt_f64, read_rows, write_text, CsvSink, GradStatRecord};
use super::run::{run, RunSummary, GRADSTATS};
use crate::error::{Error, Result};
use crate::overlap::{dispersion, GradStatRow};
use crate::tensor::reduce_stats;
use crate::transforms::TransformKind;

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const CELLS_CSV: &str = "cells.csv";

/// Outcome of one (transform, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub transform: TransformKind,
    pub seed: u64,
    pub dir: PathBuf,
    /// Error message of an aborted or failed run.
    pub failure: Option<String>,
    pub val_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub train_loss: Option<f64>,
    /// Layer dispersion of gradient std, averaged over probed steps.
    pub dispersion_raw: Option<f64>,
    pub dispersion_transformed: Option<f64>,
}

/// `mean ± std` (population) over the successful cells of one transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub transform: TransformKind,
    pub runs: usize,
    pub failed: usize,
    pub val_acc: Option<MeanStd>,
    pub val_loss: Option<MeanStd>,
    pub train_acc: Option<MeanStd>,
    pub dispersion_raw: Option<MeanStd>,
    pub dispersion_transformed: Option<MeanStd>,
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub dir: PathBuf,
    pub cells: Vec<Cell>,
    pub rows: Vec<ReportRow>,
}

impl CompareReport {
    pub fn cell(&self, transform: TransformKind, seed: u64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.transform == transform && c.seed == seed)
    }
}

/// Per-step dispersion of `stage` rows in a gradstats file, averaged over
/// steps. `None` when the file has no such rows.
pub fn mean_dispersion(rows: &[GradStatRecord], stage: &str) -> Option<f64> {
    let mut by_step: BTreeMap<u64, Vec<GradStatRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.stage == stage) {
        by_step.entry(r.step).or_default().push(GradStatRow {
            step: r.step,
            path: r.path.clone(),
            mean: r.mean,
            std: r.std,
            l2norm: r.l2norm,
        });
    }
    if by_step.is_empty() {
        return None;
    }
    let per_step: Vec<f64> = by_step.values().map(dispersion).collect();
    Some(per_step.iter().sum::<f64>() / per_step.len() as f64)
}

fn cell_dir(root: &Path, transform: TransformKind, seed: u64) -> PathBuf {
    root.join(format!("{transform}-seed{seed}"))
}

fn fill_cell(cell: &mut Cell, summary: &RunSummary) -> Result<()> {
    if let Some(last) = summary.metrics.last() {
        cell.val_acc = last.val_acc;
        cell.val_loss = last.val_loss;
    }
    cell.train_acc = summary.manifest.final_train_acc;
    cell.train_loss = summary.manifest.final_train_loss;
    let stats: Vec<GradStatRecord> = read_rows(&summary.dir.join(GRADSTATS))?;
    cell.dispersion_raw = mean_dispersion(&stats, "raw");
    cell.dispersion_transformed = mean_dispersion(&stats, "transformed");
    Ok(())
}

fn mean_std(values: impl Iterator<Item = Option<f64>>) -> Option<MeanStd> {
    let v: Vec<f64> = values.flatten().collect();
    reduce_stats(&v).ok().map(|s| MeanStd {
        mean: s.mean,
        std: s.std,
    })
}

/// Runs every (transform, seed) pair under `base.out_dir` and writes
/// `report.md`, `report.csv` and `cells.csv` there. A failed cell is
/// recorded and does not stop the others.
pub fn compare(base: &ExperimentConfig, transforms: &[TransformKind], seeds: &[u64]) -> Result<CompareReport> {
    if transforms.is_empty() || seeds.is_empty() {
        return Err(Error::Config("compare needs at least one transform and one seed".into()));
    }
    for (i, t) in transforms.iter().enumerate() {
        if transforms[..i].contains(t) {
            return Err(Error::Config(format!("transform {t} listed twice")));
        }
    }
    base.validate()?;
    let root = base.out_dir.clone();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let mut cells = Vec::new();
    for &transform in transforms {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.transform = transform;
            cfg.seed = seed;
            cfg.out_dir = cell_dir(&root, transform, seed);
            let mut cell = Cell {
                transform,
                seed,
                dir: cfg.out_dir.clone(),
                failure: None,
                val_acc: None,
                val_loss: None,
                train_acc: None,
                train_loss: None,
                dispersion_raw: None,
                dispersion_transformed: None,
            };
            log::info!("compare: {transform} seed {seed}");
            match run(&cfg).and_then(|s| fill_cell(&mut cell, &s)) {
                Ok(()) => {}
                Err(e) => {
                    log::warn!("cell {transform}/seed {seed} failed: {e}");
                    cell.failure = Some(e.to_string());
                }
            }
            cells.push(cell);
        }
    }
    let rows = transforms
        .iter()
        .map(|&t| {
            let ok: Vec<&Cell> = cells.iter().filter(|c| c.transform == t && c.failure.is_none()).collect();
            let failed = cells.iter().filter(|c| c.transform == t && c.failure.is_some()).count();
            ReportRow {
                transform: t,
                runs: ok.len(),
                failed,
                val_acc: mean_std(ok.iter().map(|c| c.val_acc)),
                val_loss: mean_std(ok.iter().map(|c| c.val_loss)),
                train_acc: mean_std(ok.iter().map(|c| c.train_acc)),
                dispersion_raw: mean_std(ok.iter().map(|c| c.dispersion_raw)),
                dispersion_transformed: mean_std(ok.iter().map(|c| c.dispersion_transformed)),
            }
        })
        .collect();
    let report = CompareReport { dir: root, cells, rows };
    write_reports(&report)?;
    Ok(report)
}

fn ms_fields(v: Option<MeanStd>) -> [String; 2] {
    match v {
        Some(m) => [fmt_f64(m.mean), fmt_f64(m.std)],
        None => [String::new(), String::new()],
    }
}

fn ms_text(v: Option<MeanStd>) -> String {
    v.map_or_else(|| "n/a".to_string(), |m| format!("{:.4} ± {:.4}", m.mean, m.std))
}

fn write_reports(report: &CompareReport) -> Result<()> {
    let dir = &report.dir;
    let mut csv = CsvSink::create(
        &dir.join(REPORT_CSV),
        &[
            "transform",
            "runs",
            "failed",
            "val_acc_mean",
            "val_acc_std",
            "val_loss_mean",
            "val_loss_std",
            "train_acc_mean",
            "train_acc_std",
            "dispersion_raw_mean",
            "dispersion_raw_std",
            "dispersion_transformed_mean",
            "dispersion_transformed_std",
        ],
    )?;
    for r in &report.rows {
        let mut fields = vec![r.transform.to_string(), r.runs.to_string(), r.failed.to_string()];
        for v in [r.val_acc, r.val_loss, r.train_acc, r.dispersion_raw, r.dispersion_transformed] {
            fields.extend(ms_fields(v));
        }
        csv.raw(&fields)?;
    }

    let mut cells = CsvSink::create(
        &dir.join(CELLS_CSV),
        &[
            "transform",
            "seed",
            "status",
            "val_acc",
            "val_loss",
            "train_acc",
            "train_loss",
            "dispersion_raw",
            "dispersion_transformed",
            "dir",
        ],
    )?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for c in &report.cells {
        cells.raw(&[
            c.transform.to_string(),
            c.seed.to_string(),
            if c.failure.is_some() { "failed" } else { "ok" }.to_string(),
            opt(c.val_acc),
            opt(c.val_loss),
            opt(c.train_acc),
            opt(c.train_loss),
            opt(c.dispersion_raw),
            opt(c.dispersion_transformed),
            c.dir.display().to_string(),
        ])?;
    }

    let mut md = String::from("# Comparison\n\n");
    md.push_str(
        "| transform | runs | failed | val acc | val loss | train acc | layer dispersion (raw) | layer dispersion (transformed) |\n",
    );
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in &report.rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            r.transform,
            r.runs,
            r.failed,
            ms_text(r.val_acc),
            ms_text(r.val_loss),
            ms_text(r.train_acc),
            ms_text(r.dispersion_raw),
            ms_text(r.dispersion_transformed)
        );
    }
    md.push_str(
        "\nLayer dispersion is the standard deviation, across parameter tensors, of each tensor's gradient \
         standard deviation, averaged over probed steps.\n",
    );
    let failures: Vec<&Cell> = report.cells.iter().filter(|c| c.failure.is_some()).collect();
    if !failures.is_empty() {
        md.push_str("\n## Failed runs\n\n");
        for c in failures {
            let _ = writeln!(md, "- {} seed {}: {}", c.transform, c.seed, c.failure.as_deref().unwrap_or(""));
        }
    }
    write_text(&dir.join(REPORT_MD), &md)
}
