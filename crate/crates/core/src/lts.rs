//! Lottery-ticket scratcher: per-weight EMA distance to the current
//! quantization level, a threshold that grows after warmup, and permanent
//! freezing of weights whose distance falls below it.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::quant::{normalize, quantize_levels, BitWidth, ClipBounds};
use crate::tensor::{Scalar, Tensor};

/// How weights get frozen during quantization-aware training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FreezeMode {
    /// Plain QAT; nothing is ever frozen.
    Baseline,
    /// EMA-distance freezing.
    #[default]
    Lts,
    /// Random positions frozen to follow a recorded sparsity trajectory.
    Random,
}

/// Growth of the freezing rate `p` after warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum RateStrategy {
    Fixing,
    #[default]
    Linear,
    Sine,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " '{}'"), other))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self { $(v if *v == $variant => $name,)+ _ => unreachable!() };
                f.write_str(name)
            }
        }
    };
}

str_enum!(FreezeMode, "freeze mode",
    "baseline" => FreezeMode::Baseline,
    "lts" => FreezeMode::Lts,
    "random" => FreezeMode::Random,
);

str_enum!(RateStrategy, "rate strategy",
    "fixing" => RateStrategy::Fixing,
    "linear" => RateStrategy::Linear,
    "sine" => RateStrategy::Sine,
);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LtsHyperparams {
    pub mode: FreezeMode,
    /// EMA momentum `m`, in `[0, 1)`.
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub strategy: RateStrategy,
    /// Constant rate for [`RateStrategy::Fixing`].
    pub fixed_rate: f64,
}

impl Default for LtsHyperparams {
    fn default() -> Self {
        Self {
            mode: FreezeMode::Lts,
            momentum: 0.99,
            warmup_epochs: 12,
            strategy: RateStrategy::Linear,
            fixed_rate: 0.05,
        }
    }
}

impl LtsHyperparams {
    pub fn validate(&self, total_epochs: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "lts.m must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.fixed_rate) {
            return Err(Error::Config(format!(
                "lts.c must be in [0, 1], got {}",
                self.fixed_rate
            )));
        }
        if self.warmup_epochs > total_epochs {
            return Err(Error::Config(format!(
                "lts.warmup_epochs ({}) exceeds total epochs ({total_epochs})",
                self.warmup_epochs
            )));
        }
        if self.strategy != RateStrategy::Fixing && self.warmup_epochs >= total_epochs {
            return Err(Error::Config(
                "growth strategies need warmup_epochs < epochs".into(),
            ));
        }
        Ok(())
    }

    /// Rate `p` at 1-based iteration `i`.
    pub fn rate(&self, i: usize, iters_per_epoch: usize, total_epochs: usize) -> Result<f64> {
        rate_schedule(
            self.strategy,
            i,
            iters_per_epoch,
            total_epochs,
            self.warmup_epochs,
            self.fixed_rate,
        )
    }
}

/// Freezing rate at 1-based iteration `i`; zero throughout warmup.
pub fn rate_schedule(
    strategy: RateStrategy,
    i: usize,
    iters_per_epoch: usize,
    total_epochs: usize,
    warmup_epochs: usize,
    fixed_rate: f64,
) -> Result<f64> {
    let warm = iters_per_epoch * warmup_epochs;
    let total = iters_per_epoch * total_epochs;
    if strategy != RateStrategy::Fixing && total <= warm {
        return Err(Error::Config(format!(
            "{strategy} growth needs warmup ({warmup_epochs} epochs) shorter than training ({total_epochs} epochs)"
        )));
    }
    if i <= warm {
        return Ok(0.0);
    }
    let p = match strategy {
        RateStrategy::Fixing => fixed_rate,
        RateStrategy::Linear => (i - warm) as f64 / (total - warm) as f64,
        RateStrategy::Sine => ((i - warm) as f64 / (total - warm) as f64 * FRAC_PI_2).sin(),
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Freezing threshold `t = (2 / 2^B) · p`.
pub fn threshold(bits: BitWidth, rate: f64) -> f64 {
    bits.interval() * rate
}

/// Distance between each normalized weight and its level, expressed in the
/// dequantized weight domain (twice the normalized distance).
pub fn level_distance<T: Scalar>(
    normalized: &Tensor<T>,
    levels: &[u8],
    bits: BitWidth,
) -> Result<Tensor<T>> {
    if normalized.numel() != levels.len() {
        return Err(Error::dim(
            "level_distance",
            normalized.shape(),
            &[levels.len()],
        ));
    }
    let scale = T::of(bits.max_level() as f64);
    let two = T::of(2.0);
    let data = normalized
        .data()
        .iter()
        .zip(levels)
        .map(|(&w, &q)| two * (w - T::of(q as f64) / scale).abs())
        .collect();
    Tensor::new(normalized.shape(), data)
}

/// Normalized weights and their level indices under the current bounds.
pub fn observe_weights<T: Scalar>(
    weight: &Tensor<T>,
    bounds: &ClipBounds<T>,
    bits: BitWidth,
) -> Result<(Tensor<T>, Vec<u8>)> {
    let normalized = normalize(weight, bounds)?;
    let levels = quantize_levels(&normalized, bits)
        .data()
        .iter()
        .map(|q| q.as_f64() as u8)
        .collect();
    Ok((normalized, levels))
}

/// Counts from one [`FreezeState::ema_update`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EmaStats {
    /// Unfrozen weights whose level changed (their distance was reset).
    pub level_changes: usize,
    /// Frozen weights whose level moved because the clip bounds drifted.
    pub frozen_level_changes: usize,
}

/// Per-layer scheduler state. The frozen mask itself lives with the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeState<T> {
    pub bits: BitWidth,
    pub ema: Vec<T>,
    pub last_level: Vec<u8>,
    pub rate: f64,
    pub threshold: f64,
}

impl<T: Scalar> FreezeState<T> {
    /// Every distance starts at the reset value, as if each level had just changed.
    pub fn new(bits: BitWidth, initial_levels: Vec<u8>) -> Self {
        Self {
            bits,
            ema: vec![T::of(bits.interval()); initial_levels.len()],
            last_level: initial_levels,
            rate: 0.0,
            threshold: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.ema.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ema.is_empty()
    }

    /// EMA step on unfrozen weights; a level change resets the distance to `2 / 2^B`.
    pub fn ema_update(
        &mut self,
        distance: &[T],
        levels: &[u8],
        momentum: f64,
        frozen: &[bool],
    ) -> Result<EmaStats> {
        let n = self.ema.len();
        if distance.len() != n || levels.len() != n || frozen.len() != n {
            return Err(Error::dim(
                "ema_update",
                &[n],
                &[distance.len(), levels.len(), frozen.len()],
            ));
        }
        let m = T::of(momentum);
        let one_minus_m = T::of(1.0 - momentum);
        let reset = T::of(self.bits.interval());
        let mut stats = EmaStats::default();
        for e in 0..n {
            let changed = levels[e] != self.last_level[e];
            if frozen[e] {
                if changed {
                    stats.frozen_level_changes += 1;
                    self.last_level[e] = levels[e];
                }
                continue;
            }
            if changed {
                self.ema[e] = reset;
                self.last_level[e] = levels[e];
                stats.level_changes += 1;
            } else {
                self.ema[e] = m * self.ema[e] + one_minus_m * distance[e];
            }
        }
        Ok(stats)
    }

    pub fn set_rate(&mut self, rate: f64) {
        self.rate = rate;
        self.threshold = threshold(self.bits, rate);
    }

    /// Freeze every weight whose EMA distance is strictly below the threshold.
    /// Returns the indices frozen by this call.
    pub fn freeze_step(&self, frozen: &mut [bool]) -> Vec<usize> {
        freeze_below(&self.ema, self.threshold, frozen)
    }
}

/// `frozen[e] |= distance[e] < t`; returns the newly frozen indices.
pub fn freeze_below<T: Scalar>(distance: &[T], t: f64, frozen: &mut [bool]) -> Vec<usize> {
    let mut newly = Vec::new();
    for (e, (f, d)) in frozen.iter_mut().zip(distance).enumerate() {
        if !*f && d.as_f64() < t {
            *f = true;
            newly.push(e);
        }
    }
    newly
}
