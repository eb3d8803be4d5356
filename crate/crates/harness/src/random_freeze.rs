//! Control experiment: freeze uniformly random weights so the pooled frozen
//! fraction follows the trajectory recorded by an lts run.

use lts_core::nn::Model;
use lts_core::Scalar;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{HarnessError, Result};

/// Freeze random unfrozen positions across `masks` until the pooled frozen
/// count reaches `⌊trajectory[i-1] · numel⌋`. Never unfreezes. Returns the
/// newly frozen indices per mask.
pub fn random_freeze_step(
    masks: &mut [&mut [bool]],
    trajectory: &[f64],
    i: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let target_frac = *i
        .checked_sub(1)
        .and_then(|k| trajectory.get(k))
        .ok_or_else(|| {
            HarnessError::invalid(format!(
                "sparsity trajectory has {} entries, iteration {i} requested",
                trajectory.len()
            ))
        })?;
    if !(0.0..=1.0).contains(&target_frac) {
        return Err(HarnessError::invalid(format!(
            "trajectory value {target_frac} at iteration {i} is outside [0, 1]"
        )));
    }
    let numel: usize = masks.iter().map(|m| m.len()).sum();
    let frozen: usize = masks.iter().map(|m| m.iter().filter(|&&f| f).count()).sum();
    let target = (target_frac * numel as f64).floor() as usize;
    let mut newly = vec![Vec::new(); masks.len()];
    if target <= frozen {
        return Ok(newly);
    }
    let open: Vec<(usize, usize)> = masks
        .iter()
        .enumerate()
        .flat_map(|(l, m)| m.iter().enumerate().filter(|(_, &f)| !f).map(move |(e, _)| (l, e)))
        .collect();
    let mut picks: Vec<usize> = sample(rng, open.len(), target - frozen).into_vec();
    picks.sort_unstable();
    for k in picks {
        let (l, e) = open[k];
        masks[l][e] = true;
        newly[l].push(e);
    }
    Ok(newly)
}

/// [`random_freeze_step`] over the quantized layers of `model`; velocities of
/// newly frozen weights are cleared as with scheduler freezing.
pub fn random_freeze_model<T: Scalar>(
    model: &mut Model<T>,
    trajectory: &[f64],
    i: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    let mut masks: Vec<Vec<bool>> = model
        .quantized_layers()
        .map(|(_, w)| w.params.frozen.clone())
        .collect();
    let mut views: Vec<&mut [bool]> = masks.iter_mut().map(|m| m.as_mut_slice()).collect();
    let newly = random_freeze_step(&mut views, trajectory, i, rng)?;
    let mut count = 0;
    let layers = model.weight_layers_mut().filter(|(_, w)| w.quant.is_some());
    for ((_, w), idx) in layers.zip(&newly) {
        w.params.freeze(idx);
        count += idx.len();
    }
    Ok(count)
}
