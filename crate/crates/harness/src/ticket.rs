//! Lottery-ticket ratio: how much of the final quantized network each epoch
//! had already found.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::{Checkpoint, TensorData};
use crate::error::{HarnessError, Result};
use crate::metrics::TicketRecord;

pub const LEVELS_FILE: &str = "levels.bin";

/// Level indices of every quantized layer, keyed by epoch. Epoch 0 is the
/// state before the first quantization-aware update.
pub type LevelSnapshots = BTreeMap<usize, Vec<(usize, Vec<u8>)>>;

/// For every epoch and layer, the fraction of weights whose level equals
/// the level they have at `best_epoch`.
pub fn ticket_ratio_curve(snapshots: &LevelSnapshots, best_epoch: usize) -> Result<Vec<TicketRecord>> {
    let best = snapshots
        .get(&best_epoch)
        .ok_or_else(|| HarnessError::invalid(format!("no level snapshot for best epoch {best_epoch}")))?;
    let last = snapshots.keys().next_back().copied().unwrap_or(0);
    let mut out = Vec::new();
    for epoch in 0..=last {
        let snap = snapshots
            .get(&epoch)
            .ok_or_else(|| HarnessError::invalid(format!("no level snapshot for epoch {epoch}")))?;
        if snap.len() != best.len() {
            return Err(HarnessError::invalid(format!(
                "epoch {epoch} has {} layers, best epoch has {}",
                snap.len(),
                best.len()
            )));
        }
        for ((layer, q), (best_layer, qb)) in snap.iter().zip(best) {
            if layer != best_layer || q.len() != qb.len() {
                return Err(HarnessError::invalid(format!(
                    "epoch {epoch} layer {layer} does not match best-epoch layer {best_layer}"
                )));
            }
            let same = q.iter().zip(qb).filter(|(a, b)| a == b).count();
            out.push(TicketRecord {
                epoch,
                layer: *layer,
                ratio: if q.is_empty() { 1.0 } else { same as f64 / q.len() as f64 },
            });
        }
    }
    Ok(out)
}

pub fn save_snapshots(path: &Path, snapshots: &LevelSnapshots) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    for (epoch, layers) in snapshots {
        for (layer, q) in layers {
            ckpt.push(format!("epoch{epoch}.l{layer}"), &[q.len()], TensorData::U8(q.clone()));
        }
    }
    ckpt.save(path)
}

pub fn load_snapshots(path: &Path) -> Result<LevelSnapshots> {
    let ckpt = Checkpoint::load(path)?;
    let mut out = LevelSnapshots::new();
    for t in ckpt.tensors {
        let parsed = t
            .name
            .strip_prefix("epoch")
            .and_then(|rest| rest.split_once(".l"))
            .and_then(|(e, l)| Some((e.parse::<usize>().ok()?, l.parse::<usize>().ok()?)));
        let (Some((epoch, layer)), TensorData::U8(q)) = (parsed, t.data) else {
            return Err(HarnessError::invalid(format!(
                "{}: unexpected entry '{}'",
                path.display(),
                t.name
            )));
        };
        out.entry(epoch).or_default().push((layer, q));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_example() {
        let mut snaps = LevelSnapshots::new();
        snaps.insert(0, vec![(0, vec![0, 1, 2, 3])]);
        snaps.insert(1, vec![(0, vec![0, 1, 1, 3])]);
        let curve = ticket_ratio_curve(&snaps, 1).unwrap();
        assert_eq!(curve[0].ratio, 0.75);
        assert_eq!(curve[1].ratio, 1.0);
    }

    #[test]
    fn missing_snapshot_is_an_error() {
        let mut snaps = LevelSnapshots::new();
        snaps.insert(0, vec![(0, vec![1])]);
        snaps.insert(2, vec![(0, vec![1])]);
        assert!(ticket_ratio_curve(&snaps, 2).is_err());
        assert!(ticket_ratio_curve(&snaps, 5).is_err());
    }
}
