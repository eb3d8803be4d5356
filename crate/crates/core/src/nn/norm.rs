use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old value in the running-statistics update.
pub const BN_RUNNING_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization over `N×C` or `N×C×H×W` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub gamma_velocity: Vec<T>,
    pub beta_velocity: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn layout(shape: &[usize], channels: usize) -> Result<(usize, usize)> {
    if (shape.len() != 2 && shape.len() != 4) || shape[1] != channels {
        return Err(Error::dim("batch_norm", shape, &[0, channels]));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            gamma_velocity: vec![T::zero(); channels],
            beta_velocity: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with batch statistics; updates the running statistics when
    /// `update_running` is set.
    pub fn forward_train(&mut self, x: &Tensor<T>, update_running: bool) -> Result<(Tensor<T>, BnCache<T>)> {
        let c = self.channels();
        let (n, spatial) = layout(x.shape(), c)?;
        let count = (n * spatial) as f64;
        let data = x.data();
        let mut out = vec![T::zero(); x.numel()];
        let mut normalized = vec![T::zero(); x.numel()];
        let mut inv_stds = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * spatial;
                sum += data[base..base + spatial].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * spatial;
                sq += data[base..base + spatial]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            let var = sq / count;
            let inv_std = 1.0 / (var + BN_EPS).sqrt();
            inv_stds[ch] = T::of(inv_std);
            let (mean_t, inv_t) = (T::of(mean), T::of(inv_std));
            for b in 0..n {
                let base = (b * c + ch) * spatial;
                for e in base..base + spatial {
                    let xh = (data[e] - mean_t) * inv_t;
                    normalized[e] = xh;
                    out[e] = self.gamma[ch] * xh + self.beta[ch];
                }
            }
            if update_running {
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                let m = BN_RUNNING_MOMENTUM;
                self.running_mean[ch] = T::of(m * self.running_mean[ch].as_f64() + (1.0 - m) * mean);
                self.running_var[ch] = T::of(m * self.running_var[ch].as_f64() + (1.0 - m) * unbiased);
            }
        }
        Ok((
            Tensor::new(x.shape(), out)?,
            BnCache {
                normalized,
                inv_std: inv_stds,
                shape: x.shape().to_vec(),
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.channels();
        let (n, spatial) = layout(x.shape(), c)?;
        let mut out = x.data().to_vec();
        for ch in 0..c {
            let inv = T::one() / (self.running_var[ch] + T::of(BN_EPS)).sqrt();
            let mean = self.running_mean[ch];
            for b in 0..n {
                let base = (b * c + ch) * spatial;
                for v in &mut out[base..base + spatial] {
                    *v = self.gamma[ch] * ((*v - mean) * inv) + self.beta[ch];
                }
            }
        }
        Tensor::new(x.shape(), out)
    }

    pub fn backward(&self, grad_out: &Tensor<T>, cache: &BnCache<T>) -> Result<BnGrads<T>> {
        if grad_out.shape() != cache.shape.as_slice() {
            return Err(Error::dim("batch_norm backward", grad_out.shape(), &cache.shape));
        }
        let c = self.channels();
        let (n, spatial) = layout(grad_out.shape(), c)?;
        let count = T::of((n * spatial) as f64);
        let g = grad_out.data();
        let xh = &cache.normalized;
        let mut gx = vec![T::zero(); g.len()];
        let mut g_gamma = vec![T::zero(); c];
        let mut g_beta = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * spatial;
                for e in base..base + spatial {
                    sum_g += g[e];
                    sum_gx += g[e] * xh[e];
                }
            }
            g_beta[ch] = sum_g;
            g_gamma[ch] = sum_gx;
            let scale = self.gamma[ch] * cache.inv_std[ch] / count;
            for b in 0..n {
                let base = (b * c + ch) * spatial;
                for e in base..base + spatial {
                    gx[e] = scale * (count * g[e] - sum_g - xh[e] * sum_gx);
                }
            }
        }
        Ok(BnGrads {
            input: Tensor::new(grad_out.shape(), gx)?,
            gamma: g_gamma,
            beta: g_beta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_input_passes_through() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::new(&[4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (y, _) = bn.forward_train(&x, true).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_input_gives_beta() {
        let mut bn = BatchNorm::<f32>::new(2);
        bn.beta = vec![0.25, -3.0];
        let x = Tensor::full(&[3, 2, 2, 2], 7.5f32);
        let (y, _) = bn.forward_train(&x, false).unwrap();
        for b in 0..3 {
            for ch in 0..2 {
                for s in 0..4 {
                    assert_eq!(y.data()[(b * 2 + ch) * 4 + s], bn.beta[ch]);
                }
            }
        }
    }

    #[test]
    fn running_stats_update() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
        bn.forward_train(&x, true).unwrap();
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased variance of [1, 3] is 2
        assert!((bn.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
        let y = bn.forward_eval(&x).unwrap();
        assert!((y.data()[0] - (1.0 - 0.2) / (1.1f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch() {
        let mut bn = BatchNorm::<f32>::new(3);
        assert!(bn.forward_train(&Tensor::zeros(&[2, 2, 1, 1]), true).is_err());
    }
}
