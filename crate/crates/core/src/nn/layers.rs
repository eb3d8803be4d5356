//! Weight layers (linear and im2col convolution, optionally fake-quantized)
//! and the parameter-free layers used by the reference models.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lts::FreezeState;
use crate::quant::{
    fake_quant_backward, fake_quant_forward, init_bounds, BitWidth, BoundGradMode, ClipBounds,
    QuantCache, QuantConfig, QuantKind, Rounding,
};
use crate::sparse::{weight_grad_dense, weight_grad_skipped, SkipGemmReport};
use crate::tensor::{
    col2im, from_channel_major, gemm, im2col_with, to_channel_major, ConvGeometry, Scalar, Tensor,
};

/// What to do with the clip-bound gradient contributions of frozen weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FrozenBoundGrad {
    /// Frozen dot products are skipped, so their share of the bound gradient is dropped.
    #[default]
    Drop,
    /// Compute the full weight gradient so frozen weights still move the bounds;
    /// nothing is skipped.
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightShape {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
}

impl WeightShape {
    pub fn out_dim(&self) -> usize {
        match *self {
            WeightShape::Linear { out_features, .. } => out_features,
            WeightShape::Conv { out_channels, .. } => out_channels,
        }
    }

    /// Columns of the weight matrix (`fan_in`).
    pub fn fan_in(&self) -> usize {
        match *self {
            WeightShape::Linear { in_features, .. } => in_features,
            WeightShape::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
        }
    }

    pub fn tensor_shape(&self) -> Vec<usize> {
        match *self {
            WeightShape::Linear {
                in_features,
                out_features,
            } => vec![out_features, in_features],
            WeightShape::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels, in_channels, kernel, kernel],
        }
    }
}

/// Trainable weight, full-precision bias and their optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub weight_velocity: Vec<T>,
    pub bias_velocity: Vec<T>,
    /// Monotone: entries only ever go from false to true.
    pub frozen: Vec<bool>,
}

impl<T: Scalar> ParamState<T> {
    pub fn new(weight: Tensor<T>, out_dim: usize) -> Self {
        let n = weight.numel();
        Self {
            weight,
            bias: Tensor::zeros(&[out_dim]),
            weight_velocity: vec![T::zero(); n],
            bias_velocity: vec![T::zero(); out_dim],
            frozen: vec![false; n],
        }
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    /// Freeze the given positions and drop their momentum.
    pub fn freeze(&mut self, indices: &[usize]) {
        for &e in indices {
            self.frozen[e] = true;
            self.weight_velocity[e] = T::zero();
        }
    }
}

/// Clip bounds plus their momentum buffer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundsParam<T> {
    pub bounds: ClipBounds<T>,
    pub velocity: [T; 2],
}

impl<T: Scalar> BoundsParam<T> {
    pub fn new(bounds: ClipBounds<T>) -> Self {
        Self {
            bounds,
            velocity: [T::zero(); 2],
        }
    }
}

/// Quantization state of one layer: weight and input-activation quantizers
/// plus the freezing scheduler for its weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerQuant<T> {
    pub bits: BitWidth,
    pub bound_grad: BoundGradMode,
    pub rounding: Rounding,
    pub weight_bounds: BoundsParam<T>,
    pub act_bounds: BoundsParam<T>,
    pub freeze: FreezeState<T>,
}

impl<T: Scalar> LayerQuant<T> {
    pub fn weight_config(&self) -> QuantConfig {
        QuantConfig {
            bits: self.bits,
            kind: QuantKind::Weight,
            bound_grad: self.bound_grad,
            rounding: self.rounding,
        }
    }

    pub fn act_config(&self) -> QuantConfig {
        QuantConfig {
            bits: self.bits,
            kind: QuantKind::Activation,
            bound_grad: self.bound_grad,
            rounding: self.rounding,
        }
    }
}

/// Linear or convolution layer computed as one GEMM against unfolded activations.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightLayer<T> {
    pub shape: WeightShape,
    pub params: ParamState<T>,
    pub quant: Option<LayerQuant<T>>,
}

/// Forward-pass state kept for [`WeightLayer::backward`].
#[derive(Clone, Debug)]
pub struct WeightCache<T> {
    /// Unfolded (quantized) input, `K × P`.
    cols: Tensor<T>,
    /// Weight matrix used in the forward GEMM, `M × K`.
    weight_matrix: Tensor<T>,
    weight_cache: Option<QuantCache<T>>,
    act_cache: Option<QuantCache<T>>,
    geometry: Option<ConvGeometry>,
    batch: usize,
}

/// Gradients of one weight layer.
#[derive(Clone, Debug)]
pub struct WeightGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    /// `(∂L/∂l, ∂L/∂u)` of the weight quantizer.
    pub weight_bounds: [T; 2],
    /// `(∂L/∂l, ∂L/∂u)` of the input-activation quantizer.
    pub act_bounds: [T; 2],
    pub report: SkipGemmReport,
    pub act_grad_macs: u64,
}

impl<T: Scalar> WeightLayer<T> {
    /// He-normal weights, zero bias.
    pub fn new(shape: WeightShape, rng: &mut impl Rng) -> Self {
        let std = (2.0 / shape.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let wshape = shape.tensor_shape();
        let weight = Tensor::from_fn(&wshape, |_| T::of(normal.sample(rng)));
        Self {
            shape,
            params: ParamState::new(weight, shape.out_dim()),
            quant: None,
        }
    }

    /// Enable fake quantization: weight bounds at `±3σ`, activation bounds
    /// placeholder until [`WeightLayer::calibrate`] sees real inputs.
    pub fn enable_quant(&mut self, bits: BitWidth, bound_grad: BoundGradMode) -> Result<()> {
        let weight_bounds = init_bounds(self.params.weight.data(), QuantKind::Weight)?;
        let (_, levels) =
            crate::lts::observe_weights(&self.params.weight, &weight_bounds, bits)?;
        self.quant = Some(LayerQuant {
            bits,
            bound_grad,
            rounding: Rounding::HalfEven,
            weight_bounds: BoundsParam::new(weight_bounds),
            act_bounds: BoundsParam::new(ClipBounds::new(T::zero(), T::one())?),
            freeze: FreezeState::new(bits, levels),
        });
        Ok(())
    }

    /// Set activation bounds to the min/max of a calibration input.
    pub fn calibrate(&mut self, x: &Tensor<T>) -> Result<()> {
        if let Some(q) = self.quant.as_mut() {
            q.act_bounds = BoundsParam::new(init_bounds(x.data(), QuantKind::Activation)?);
        }
        Ok(())
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<Option<ConvGeometry>> {
        match self.shape {
            WeightShape::Linear { in_features, .. } => {
                if x.rank() != 2 || x.dim(1) != in_features {
                    return Err(Error::dim("linear forward", x.shape(), &[x.shape()[0], in_features]));
                }
                Ok(None)
            }
            WeightShape::Conv {
                in_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                if x.rank() != 4 || x.dim(1) != in_channels {
                    return Err(Error::dim("conv forward", x.shape(), &[0, in_channels, 0, 0]));
                }
                Ok(Some(ConvGeometry::new(x.shape(), kernel, kernel, stride, pad)?))
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, WeightCache<T>)> {
        let geometry = self.geometry(x)?;
        let batch = x.dim(0);
        let m = self.shape.out_dim();
        let k = self.shape.fan_in();

        let (weight_q, weight_cache, x_q, act_cache) = match &self.quant {
            Some(q) => {
                let (wq, wc) = fake_quant_forward(
                    &self.params.weight,
                    &q.weight_bounds.bounds,
                    &q.weight_config(),
                )?;
                let (xq, ac) = fake_quant_forward(x, &q.act_bounds.bounds, &q.act_config())?;
                (wq, Some(wc), xq, Some(ac))
            }
            None => (self.params.weight.clone(), None, x.clone(), None),
        };
        let weight_matrix = weight_q.reshape(&[m, k])?;
        let cols = match &geometry {
            Some(g) => im2col_with(&x_q, g)?,
            None => x_q.transpose()?,
        };
        let p = cols.dim(1);
        let mut out = vec![T::zero(); m * p];
        gemm(m, k, p, weight_matrix.data(), cols.data(), &mut out);
        for (row, &b) in out.chunks_exact_mut(p).zip(self.params.bias.data()) {
            for v in row {
                *v += b;
            }
        }
        let out = Tensor::new(&[m, p], out)?;
        let y = match &geometry {
            Some(g) => from_channel_major(&out, batch, g.out_h(), g.out_w())?,
            None => out.transpose()?,
        };
        Ok((
            y,
            WeightCache {
                cols,
                weight_matrix,
                weight_cache,
                act_cache,
                geometry,
                batch,
            },
        ))
    }

    /// Backward through the GEMM and both quantizers. The weight gradient
    /// skips every frozen position.
    pub fn backward(
        &self,
        grad_out: &Tensor<T>,
        cache: &WeightCache<T>,
        frozen_bound_grad: FrozenBoundGrad,
    ) -> Result<WeightGrads<T>> {
        let m = self.shape.out_dim();
        let k = self.shape.fan_in();
        let g_out = match &cache.geometry {
            Some(_) => to_channel_major(grad_out)?,
            None => grad_out.transpose()?,
        };
        if g_out.shape() != [m, cache.cols.dim(1)] {
            return Err(Error::dim("weight layer backward", g_out.shape(), &[m, cache.cols.dim(1)]));
        }
        let p = g_out.dim(1);

        let bias: Vec<T> = g_out
            .data()
            .chunks_exact(p)
            .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v))
            .collect();

        let frozen = &self.params.frozen;
        let (g_wq, report) = if self.quant.is_some() && frozen_bound_grad == FrozenBoundGrad::Keep {
            let full = weight_grad_dense(&cache.cols, &g_out)?;
            (
                full,
                SkipGemmReport {
                    macs_performed: (m * k * p) as u64,
                    macs_skipped: 0,
                    elapsed: Default::default(),
                },
            )
        } else {
            weight_grad_skipped(&cache.cols, &g_out, frozen)?
        };
        let g_wq = g_wq.reshape(self.params.weight.shape())?;

        let (mut weight, weight_bounds) = match &cache.weight_cache {
            Some(wc) => {
                let g = fake_quant_backward(&g_wq, wc)?;
                (g.input, [g.lower, g.upper])
            }
            None => (g_wq, [T::zero(); 2]),
        };
        for (g, &f) in weight.data_mut().iter_mut().zip(frozen) {
            if f {
                *g = T::zero();
            }
        }

        let wt = cache.weight_matrix.transpose()?;
        let mut g_cols = vec![T::zero(); k * p];
        gemm(k, m, p, wt.data(), g_out.data(), &mut g_cols);
        let g_cols = Tensor::new(&[k, p], g_cols)?;
        let g_xq = match &cache.geometry {
            Some(geom) => col2im(&g_cols, geom)?,
            None => g_cols.transpose()?,
        };
        debug_assert_eq!(g_xq.dim(0), cache.batch);
        let (input, act_bounds) = match &cache.act_cache {
            Some(ac) => {
                let g = fake_quant_backward(&g_xq, ac)?;
                (g.input, [g.lower, g.upper])
            }
            None => (g_xq, [T::zero(); 2]),
        };
        Ok(WeightGrads {
            input,
            weight,
            bias,
            weight_bounds,
            act_bounds,
            report,
            act_grad_macs: (m * k * p) as u64,
        })
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    (x.map(|v| v.max(T::zero())), mask)
}

pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    if grad_out.numel() != mask.len() {
        return Err(Error::dim("relu backward", grad_out.shape(), &[mask.len()]));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { g } else { T::zero() })
        .collect();
    Tensor::new(grad_out.shape(), data)
}

/// Non-overlapping `size×size` max pooling; returns the argmax of each window.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 4 || x.dim(2) % size != 0 || x.dim(3) % size != 0 {
        return Err(Error::dim("maxpool", x.shape(), &[0, 0, size, size]));
    }
    let [n, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, argmax))
}

pub fn maxpool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.numel() != argmax.len() {
        return Err(Error::dim("maxpool backward", grad_out.shape(), &[argmax.len()]));
    }
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&v, &idx) in grad_out.data().iter().zip(argmax) {
        gd[idx] += v;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(in_f: usize, out_f: usize) -> WeightLayer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        WeightLayer::new(
            WeightShape::Linear {
                in_features: in_f,
                out_features: out_f,
            },
            &mut rng,
        )
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut layer = linear(3, 2);
        layer.params.weight = Tensor::zeros(&[2, 3]);
        layer.params.bias = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let x = Tensor::from_fn(&[4, 3], |i| i as f64);
        let (y, _) = layer.forward(&x).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn zero_grad_gives_zero_grads() {
        let mut layer = linear(3, 2);
        layer.enable_quant(BitWidth::new(4).unwrap(), BoundGradMode::Literal).unwrap();
        let x = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.3).sin());
        layer.calibrate(&x).unwrap();
        let (y, cache) = layer.forward(&x).unwrap();
        let g = layer
            .backward(&Tensor::zeros(y.shape()), &cache, FrozenBoundGrad::Drop)
            .unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
        assert_eq!(g.weight_bounds, [0.0; 2]);
        assert_eq!(g.act_bounds, [0.0; 2]);
    }

    #[test]
    fn relu_and_pool() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![-1.0f32, 3.0, 2.0, 0.5]).unwrap();
        let (r, mask) = relu_forward(&x);
        assert_eq!(r.data(), &[0.0, 3.0, 2.0, 0.5]);
        let (p, arg) = maxpool_forward(&x, 2).unwrap();
        assert_eq!(p.data(), &[3.0]);
        let g = maxpool_backward(&Tensor::full(&[1, 1, 1, 1], 2.0), &arg, x.shape()).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
        let gr = relu_backward(&Tensor::full(&[1, 1, 2, 2], 1.0), &mask).unwrap();
        assert_eq!(gr.data(), &[0.0, 1.0, 1.0, 1.0]);
        assert!(maxpool_forward(&Tensor::<f32>::zeros(&[1, 1, 3, 3]), 2).is_err());
    }
}
