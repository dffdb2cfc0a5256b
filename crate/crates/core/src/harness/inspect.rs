use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::csvio::read_rows;
use super::run::{Manifest, OVERLAP};
use crate::error::Result;
use crate::overlap::OverlapRecord;

/// Overlap statistics of one block over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapSummary {
    pub epoch: usize,
    pub block: String,
    pub records: usize,
    pub mean_cosine: f64,
    pub mean_amplification: f64,
    pub max_amplification: f64,
    pub mean_skip_norm: f64,
    pub mean_branch_norm: f64,
}

/// Groups a run's `overlap.csv` by (epoch, block), blocks in the order
/// they first appear.
pub fn inspect_overlap(dir: &Path) -> Result<Vec<OverlapSummary>> {
    let manifest = Manifest::load(dir)?;
    let records: Vec<OverlapRecord> = read_rows(&dir.join(OVERLAP))?;
    let per_epoch = manifest.steps_per_epoch.max(1) as u64;
    let mut out: Vec<OverlapSummary> = Vec::new();
    for r in &records {
        let epoch = (r.step / per_epoch) as usize + 1;
        let slot = match out.iter().position(|s| s.epoch == epoch && s.block == r.block) {
            Some(i) => i,
            None => {
                out.push(OverlapSummary {
                    epoch,
                    block: r.block.clone(),
                    records: 0,
                    mean_cosine: 0.0,
                    mean_amplification: 0.0,
                    max_amplification: 0.0,
                    mean_skip_norm: 0.0,
                    mean_branch_norm: 0.0,
                });
                out.len() - 1
            }
        };
        let s = &mut out[slot];
        s.records += 1;
        s.mean_cosine += r.cosine;
        s.mean_amplification += r.amplification;
        s.max_amplification = s.max_amplification.max(r.amplification);
        s.mean_skip_norm += r.skip_norm;
        s.mean_branch_norm += r.branch_norm;
    }
    for s in &mut out {
        let n = s.records as f64;
        s.mean_cosine /= n;
        s.mean_amplification /= n;
        s.mean_skip_norm /= n;
        s.mean_branch_norm /= n;
    }
    out.sort_by_key(|s| s.epoch);
    Ok(out)
}

pub fn format_table(rows: &[OverlapSummary]) -> String {
    let mut t = format!(
        "{:>5}  {:<10} {:>7} {:>11} {:>9} {:>9} {:>12} {:>12}\n",
        "epoch", "block", "records", "mean cosine", "mean amp", "max amp", "skip norm", "branch norm"
    );
    for r in rows {
        let _ = writeln!(
            t,
            "{:>5}  {:<10} {:>7} {:>11.4} {:>9.4} {:>9.4} {:>12.4e} {:>12.4e}",
            r.epoch,
            r.block,
            r.records,
            r.mean_cosine,
            r.mean_amplification,
            r.max_amplification,
            r.mean_skip_norm,
            r.mean_branch_norm
        );
    }
    t
}
