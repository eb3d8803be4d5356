//! Run records and their CSV files.
//!
//! Files are UTF-8 with `\n` line endings and `.` decimals. Floats are
//! written in shortest round-trip form, so reading a file back yields the
//! in-memory records exactly.

use std::fs::File;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// One training iteration. `wgs` is the pooled frozen fraction of quantized
/// weights whose gradients this iteration skipped; `flops_reduction = wgs / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    pub loss: f64,
    pub wgs: f64,
    pub p: f64,
    pub flops_reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub epoch: usize,
    pub top1: f64,
}

/// Per-layer freezing state after the scheduler update of `iter`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub iter: usize,
    pub layer: usize,
    pub frozen: usize,
    pub total: usize,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TicketRecord {
    pub epoch: usize,
    pub layer: usize,
    pub ratio: f64,
}

/// Per-epoch totals that do not fit the fixed files above. Level-change
/// counts come from the scheduler and are empty in modes that do not run it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub level_changes: Option<usize>,
    pub frozen_level_changes: Option<usize>,
    pub macs_performed: u64,
    pub macs_baseline: u64,
}

/// One-row run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub model: String,
    pub bits: u8,
    pub seed: u64,
    pub epochs: usize,
    pub iterations: usize,
    pub best_epoch: usize,
    pub best_top1: f64,
    pub final_top1: f64,
    pub avg_wgs: f64,
    /// Headline figure, `avg_wgs / 2`.
    pub flops_reduction: f64,
    /// Skipped over dense backward MACs, summed over the run.
    pub mac_flops_reduction: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub iters: Vec<IterRecord>,
    pub accuracy: Vec<AccuracyRecord>,
    pub layers: Vec<LayerRecord>,
    pub tickets: Vec<TicketRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const ACCURACY_CSV: &str = "accuracy.csv";
pub const LAYERS_CSV: &str = "sparsity_per_layer.csv";
pub const TICKET_CSV: &str = "ticket_ratio.csv";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

/// Mean over iterations of the per-iteration pooled frozen fraction.
pub fn avg_wgs(per_iter: &[f64]) -> Result<f64> {
    if per_iter.is_empty() {
        return Err(HarnessError::invalid("avg_wgs of an empty run"));
    }
    Ok(per_iter.iter().sum::<f64>() / per_iter.len() as f64)
}

/// Pooled frozen fraction from per-layer `(frozen, total)` counts.
pub fn pooled_wgs(layers: &[(usize, usize)]) -> f64 {
    let (f, t) = layers.iter().fold((0, 0), |(f, t), &(a, b)| (f + a, t + b));
    if t == 0 {
        0.0
    } else {
        f as f64 / t as f64
    }
}

/// Write `rows` under `header`. The header is written even with no rows.
pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(HarnessError::from))
        .collect()
}

pub const METRICS_HEADER: [&str; 6] = ["iter", "epoch", "loss", "wgs", "p", "flops_reduction"];
pub const ACCURACY_HEADER: [&str; 2] = ["epoch", "top1"];
pub const LAYERS_HEADER: [&str; 5] = ["iter", "layer", "frozen", "total", "threshold"];
pub const TICKET_HEADER: [&str; 3] = ["epoch", "layer", "ratio"];
pub const EPOCHS_HEADER: [&str; 6] = [
    "epoch",
    "lr",
    "level_changes",
    "frozen_level_changes",
    "macs_performed",
    "macs_baseline",
];
pub const SUMMARY_HEADER: [&str; 13] = [
    "mode",
    "model",
    "bits",
    "seed",
    "epochs",
    "iterations",
    "best_epoch",
    "best_top1",
    "final_top1",
    "avg_wgs",
    "flops_reduction",
    "mac_flops_reduction",
    "elapsed_s",
];

/// Write the per-iteration, accuracy, per-layer, ticket and per-epoch files into `dir`.
pub fn emit_metrics(dir: &Path, m: &RunMetrics) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_csv(&dir.join(METRICS_CSV), &METRICS_HEADER, &m.iters)?;
    write_csv(&dir.join(ACCURACY_CSV), &ACCURACY_HEADER, &m.accuracy)?;
    write_csv(&dir.join(LAYERS_CSV), &LAYERS_HEADER, &m.layers)?;
    write_csv(&dir.join(TICKET_CSV), &TICKET_HEADER, &m.tickets)?;
    write_csv(&dir.join(EPOCHS_CSV), &EPOCHS_HEADER, &m.epochs)
}

pub fn read_metrics(dir: &Path) -> Result<RunMetrics> {
    Ok(RunMetrics {
        iters: read_csv(&dir.join(METRICS_CSV))?,
        accuracy: read_csv(&dir.join(ACCURACY_CSV))?,
        layers: read_csv(&dir.join(LAYERS_CSV))?,
        tickets: read_csv(&dir.join(TICKET_CSV))?,
        epochs: read_csv(&dir.join(EPOCHS_CSV))?,
    })
}

pub fn write_summary(dir: &Path, s: &Summary) -> Result<()> {
    write_csv(&dir.join(SUMMARY_CSV), &SUMMARY_HEADER, std::slice::from_ref(s))
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(SUMMARY_CSV);
    read_csv::<Summary>(&path)?
        .into_iter()
        .next()
        .ok_or_else(|| HarnessError::invalid(format!("{} has no rows", path.display())))
}

/// Highest top-1, earliest epoch on ties.
pub fn best_epoch(accuracy: &[AccuracyRecord]) -> Option<&AccuracyRecord> {
    accuracy
        .iter()
        .fold(None, |best: Option<&AccuracyRecord>, r| match best {
            Some(b) if b.top1 >= r.top1 => Some(b),
            _ => Some(r),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_wgs_examples() {
        assert_eq!(avg_wgs(&[0.0, 0.5, 1.0]).unwrap(), 0.5);
        let constant = vec![0.66; 40];
        assert!((avg_wgs(&constant).unwrap() / 2.0 - 0.33).abs() < 1e-12);
        assert!(avg_wgs(&[]).is_err());
        assert_eq!(pooled_wgs(&[(1, 4), (3, 4)]), 0.5);
        assert_eq!(pooled_wgs(&[]), 0.0);
    }

    #[test]
    fn best_epoch_prefers_earliest_tie() {
        let acc = [(1, 0.5), (2, 0.9), (3, 0.9), (4, 0.2)]
            .map(|(epoch, top1)| AccuracyRecord { epoch, top1 });
        assert_eq!(best_epoch(&acc).unwrap().epoch, 2);
        assert!(best_epoch(&[]).is_none());
    }
}
