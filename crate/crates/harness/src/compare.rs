//! Side-by-side summaries of finished runs.

use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::metrics::{best_epoch, read_metrics, read_summary, Summary, TicketRecord};
use crate::ticket::{load_snapshots, ticket_ratio_curve, LEVELS_FILE};

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub dir: PathBuf,
    pub summary: Summary,
}

pub fn collect(dirs: &[PathBuf]) -> Result<Vec<RunRow>> {
    dirs.iter()
        .map(|d| {
            Ok(RunRow {
                dir: d.clone(),
                summary: read_summary(d)?,
            })
        })
        .collect()
}

/// Plain-text table, one run per line.
pub fn render(rows: &[RunRow]) -> String {
    let mut out = format!(
        "{:<28} {:<9} {:>4} {:>6} {:>10} {:>6} {:>8} {:>9} {:>9}\n",
        "run", "mode", "bits", "seed", "best_top1", "best@", "avg_wgs", "flops_red", "mac_red"
    );
    for r in rows {
        let s = &r.summary;
        let name = r.dir.file_name().map_or_else(|| r.dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        out.push_str(&format!(
            "{:<28} {:<9} {:>4} {:>6} {:>10.4} {:>6} {:>8.4} {:>9.4} {:>9.4}\n",
            name, s.mode, s.bits, s.seed, s.best_top1, s.best_epoch, s.avg_wgs, s.flops_reduction, s.mac_flops_reduction
        ));
    }
    out
}

/// Recompute the ticket-ratio curve of a finished run from its level
/// snapshots and best epoch.
pub fn analyze_ticket(run: &Path) -> Result<Vec<TicketRecord>> {
    let metrics = read_metrics(run)?;
    let best = best_epoch(&metrics.accuracy)
        .ok_or_else(|| HarnessError::invalid(format!("{}: no accuracy records", run.display())))?;
    let snaps = load_snapshots(&run.join(LEVELS_FILE))?;
    ticket_ratio_curve(&snaps, best.epoch)
}
