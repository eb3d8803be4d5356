use crate::error::{Error, Result};
use crate::quant::ClipBounds;
use crate::tensor::Scalar;

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier on `lr` for clip-bound updates.
    pub bound_lr_scale: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            bound_lr_scale: 1.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum and weight decay must be >= 0".into()));
        }
        if !(self.bound_lr_scale >= 0.0) {
            return Err(Error::Config(format!(
                "bound learning-rate scale must be >= 0, got {}",
                self.bound_lr_scale
            )));
        }
        Ok(())
    }
}

/// `v ← μ·v + g + λ·w; w ← w − lr·v`.
///
/// Frozen positions get no update of any kind and their velocity is held at zero.
pub fn sgd_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    frozen: Option<&[bool]>,
    cfg: &SgdConfig,
) -> Result<()> {
    cfg.validate()?;
    if grad.len() != param.len() || velocity.len() != param.len() {
        return Err(Error::dim(
            "sgd_step",
            &[param.len()],
            &[grad.len(), velocity.len()],
        ));
    }
    if let Some(mask) = frozen {
        if mask.len() != param.len() {
            return Err(Error::dim("sgd_step mask", &[param.len()], &[mask.len()]));
        }
    }
    let (lr, mu, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for e in 0..param.len() {
        if frozen.is_some_and(|m| m[e]) {
            velocity[e] = T::zero();
            continue;
        }
        let v = mu * velocity[e] + grad[e] + wd * param[e];
        velocity[e] = v;
        param[e] -= lr * v;
    }
    Ok(())
}

/// Same update for a bound pair at `lr·bound_lr_scale`, followed by the `u ≥ l + ε` repair.
pub fn sgd_step_bounds<T: Scalar>(
    bounds: &mut ClipBounds<T>,
    grad: [T; 2],
    velocity: &mut [T; 2],
    cfg: &SgdConfig,
) -> Result<()> {
    let mut p = [bounds.lower, bounds.upper];
    let scaled = SgdConfig {
        lr: cfg.lr * cfg.bound_lr_scale,
        ..*cfg
    };
    sgd_step(&mut p, &grad, velocity, None, &scaled)?;
    bounds.lower = p[0];
    bounds.upper = p[1];
    bounds.enforce_order();
    Ok(())
}
