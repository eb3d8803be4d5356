use rand::Rng;

use super::layers::{
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, FrozenBoundGrad, WeightCache,
    WeightGrads, WeightLayer, WeightShape,
};
use super::loss::cross_entropy;
use super::norm::{BatchNorm, BnCache, BnGrads};
use super::optim::{sgd_step, sgd_step_bounds, SgdConfig};
use crate::error::{Error, Result};
use crate::lts::{level_distance, observe_weights, EmaStats};
use crate::quant::{BitWidth, BoundGradMode, Rounding};
use crate::sparse::{backward_flops_accounting, BackwardFlops, SkipGemmReport};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
        quant: Option<BitWidth>,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        quant: Option<BitWidth>,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

/// Ordered layer descriptors plus the per-sample input shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
    pub bound_grad: BoundGradMode,
}

impl ModelSpec {
    /// 784→128→10 perceptron, both layers quantized when `bits` is set.
    pub fn mlp_s(bits: Option<BitWidth>) -> Self {
        Self {
            name: "mlp-s".into(),
            input_shape: vec![1, 28, 28],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 784,
                    out_features: 128,
                    quant: bits,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    in_features: 128,
                    out_features: 10,
                    quant: bits,
                },
            ],
            loss: LossKind::CrossEntropy,
            bound_grad: BoundGradMode::Literal,
        }
    }

    /// conv3×3×16/BN/ReLU → conv3×3×32/BN/ReLU → maxpool2 → fc→10.
    pub fn convnet_s(bits: Option<BitWidth>, channels: usize, height: usize, width: usize) -> Self {
        Self {
            name: "convnet-s".into(),
            input_shape: vec![channels, height, width],
            layers: vec![
                LayerSpec::Conv {
                    in_channels: channels,
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    quant: bits,
                },
                LayerSpec::BatchNorm { channels: 16 },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    in_channels: 16,
                    out_channels: 32,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    quant: bits,
                },
                LayerSpec::BatchNorm { channels: 32 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 32 * (height / 2) * (width / 2),
                    out_features: 10,
                    quant: bits,
                },
            ],
            loss: LossKind::CrossEntropy,
            bound_grad: BoundGradMode::Literal,
        }
    }

    /// Walks the layer list and returns the per-sample output shape.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let bad = |expected: &[usize]| Error::Dimension {
                op: "model spec",
                lhs: vec![idx],
                rhs: expected.to_vec(),
            };
            shape = match *layer {
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if shape != [in_features] {
                        return Err(bad(&[in_features]));
                    }
                    vec![out_features]
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return Err(bad(&[in_channels, 0, 0]));
                    }
                    let g = crate::tensor::ConvGeometry::new(
                        &[1, shape[0], shape[1], shape[2]],
                        kernel,
                        kernel,
                        stride,
                        pad,
                    )?;
                    vec![out_channels, g.out_h(), g.out_w()]
                }
                LayerSpec::BatchNorm { channels } => {
                    if shape.first() != Some(&channels) {
                        return Err(bad(&[channels]));
                    }
                    shape
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool { size } => {
                    if shape.len() != 3 || shape[1] % size != 0 || shape[2] % size != 0 {
                        return Err(bad(&[0, size, size]));
                    }
                    vec![shape[0], shape[1] / size, shape[2] / size]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
        }
        Ok(shape)
    }

    pub fn is_quantized(&self) -> bool {
        self.layers.iter().any(|l| {
            matches!(
                l,
                LayerSpec::Linear { quant: Some(_), .. } | LayerSpec::Conv { quant: Some(_), .. }
            )
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Weight(WeightLayer<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    MaxPool(usize),
    Flatten,
}

#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Weight(WeightCache<T>),
    BatchNorm(BnCache<T>),
    Relu(Vec<bool>),
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
}

#[derive(Clone, Debug)]
pub enum LayerGrads<T> {
    Weight(WeightGrads<T>),
    BatchNorm(BnGrads<T>),
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics without touching running statistics; activation
    /// quantizer bounds are (re)initialized from the data they see.
    Calibrate,
}

/// Gradients for every layer plus the backward-pass accounting.
#[derive(Clone, Debug)]
pub struct ModelGrads<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn skip_reports(&self) -> Vec<SkipGemmReport> {
        self.layers
            .iter()
            .filter_map(|g| match g {
                LayerGrads::Weight(w) => Some(w.report),
                _ => None,
            })
            .collect()
    }

    pub fn flops(&self) -> Result<BackwardFlops> {
        let (reports, act): (Vec<_>, Vec<_>) = self
            .layers
            .iter()
            .filter_map(|g| match g {
                LayerGrads::Weight(w) => Some((w.report, w.act_grad_macs)),
                _ => None,
            })
            .unzip();
        backward_flops_accounting(&reports, &act)
    }
}

/// Scheduler outcome for one quantized layer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerFreezeStats {
    pub layer: usize,
    pub ema: EmaStats,
    pub newly_frozen: usize,
    pub frozen: usize,
    pub total: usize,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer<T>>,
    pub frozen_bound_grad: FrozenBoundGrad,
}

impl<T: Scalar> Model<T> {
    /// Builds the model with He-normal weights. Quantized layers get their
    /// weight bounds immediately; activation bounds need [`Model::calibrate`].
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let layer = match *ls {
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    quant,
                } => {
                    let mut l = WeightLayer::new(
                        WeightShape::Linear {
                            in_features,
                            out_features,
                        },
                        rng,
                    );
                    if let Some(bits) = quant {
                        l.enable_quant(bits, spec.bound_grad)?;
                    }
                    Layer::Weight(l)
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    quant,
                } => {
                    let mut l = WeightLayer::new(
                        WeightShape::Conv {
                            in_channels,
                            out_channels,
                            kernel,
                            stride,
                            pad,
                        },
                        rng,
                    );
                    if let Some(bits) = quant {
                        l.enable_quant(bits, spec.bound_grad)?;
                    }
                    Layer::Weight(l)
                }
                LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNorm::new(channels)),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size } => Layer::MaxPool(size),
                LayerSpec::Flatten => Layer::Flatten,
            };
            layers.push(layer);
        }
        Ok(Self {
            spec,
            layers,
            frozen_bound_grad: FrozenBoundGrad::Drop,
        })
    }

    /// Re-derive every quantizer's weight bounds (`±3σ`) and scheduler state
    /// from the current weights, e.g. after loading a full-precision initializer.
    pub fn reinit_quantizers(&mut self) -> Result<()> {
        let bound_grad = self.spec.bound_grad;
        for layer in &mut self.layers {
            if let Layer::Weight(w) = layer {
                if let Some(bits) = w.quant.as_ref().map(|q| q.bits) {
                    let act = w.quant.as_ref().map(|q| q.act_bounds);
                    w.enable_quant(bits, bound_grad)?;
                    if let (Some(q), Some(a)) = (w.quant.as_mut(), act) {
                        q.act_bounds = a;
                    }
                }
            }
        }
        Ok(())
    }

    /// Switch every quantizer between real rounding and the identity surrogate.
    pub fn set_rounding(&mut self, rounding: Rounding) {
        for (_, w) in self.weight_layers_mut() {
            if let Some(q) = w.quant.as_mut() {
                q.rounding = rounding;
            }
        }
    }

    pub fn weight_layers(&self) -> impl Iterator<Item = (usize, &WeightLayer<T>)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Weight(w) => Some((i, w)),
            _ => None,
        })
    }

    pub fn weight_layers_mut(&mut self) -> impl Iterator<Item = (usize, &mut WeightLayer<T>)> {
        self.layers.iter_mut().enumerate().filter_map(|(i, l)| match l {
            Layer::Weight(w) => Some((i, w)),
            _ => None,
        })
    }

    pub fn quantized_layers(&self) -> impl Iterator<Item = (usize, &WeightLayer<T>)> {
        self.weight_layers().filter(|(_, w)| w.quant.is_some())
    }

    /// `(frozen, total)` over all quantized weights.
    pub fn frozen_totals(&self) -> (usize, usize) {
        self.quantized_layers().fold((0, 0), |(f, t), (_, w)| {
            (f + w.params.frozen_count(), t + w.params.weight.numel())
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() < 2 || x.shape()[1..] != self.spec.input_shape[..] {
            let mut expected = vec![0];
            expected.extend(&self.spec.input_shape);
            return Err(Error::dim("model input", x.shape(), &expected));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        self.check_input(x)?;
        let keep = mode != Mode::Eval;
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Weight(w) => {
                    if mode == Mode::Calibrate {
                        w.calibrate(&h)?;
                    }
                    let (y, c) = w.forward(&h)?;
                    (y, Some(LayerCache::Weight(c)))
                }
                Layer::BatchNorm(bn) => match mode {
                    Mode::Eval => (bn.forward_eval(&h)?, None),
                    _ => {
                        let (y, c) = bn.forward_train(&h, mode == Mode::Train)?;
                        (y, Some(LayerCache::BatchNorm(c)))
                    }
                },
                Layer::Relu => {
                    let (y, mask) = relu_forward(&h);
                    (y, Some(LayerCache::Relu(mask)))
                }
                Layer::MaxPool(size) => {
                    let shape = h.shape().to_vec();
                    let (y, argmax) = maxpool_forward(&h, *size)?;
                    (
                        y,
                        Some(LayerCache::MaxPool {
                            argmax,
                            input_shape: shape,
                        }),
                    )
                }
                Layer::Flatten => {
                    let shape = h.shape().to_vec();
                    let n = shape[0];
                    let rest = h.numel() / n;
                    (
                        h.reshape(&[n, rest])?,
                        Some(LayerCache::Flatten { input_shape: shape }),
                    )
                }
            };
            if let (true, Some(c)) = (keep, cache) {
                caches.push(c);
            }
            h = next;
        }
        Ok((h, caches))
    }

    /// Runs one batch through the model to initialize activation bounds.
    pub fn calibrate(&mut self, x: &Tensor<T>) -> Result<()> {
        self.forward(x, Mode::Calibrate).map(|_| ())
    }

    pub fn backward(&self, grad_logits: &Tensor<T>, caches: &[LayerCache<T>]) -> Result<ModelGrads<T>> {
        if caches.len() != self.layers.len() {
            return Err(Error::dim("model backward", &[caches.len()], &[self.layers.len()]));
        }
        let mut grads = vec![LayerGrads::None; self.layers.len()];
        let mut g = grad_logits.clone();
        for idx in (0..self.layers.len()).rev() {
            g = match (&self.layers[idx], &caches[idx]) {
                (Layer::Weight(w), LayerCache::Weight(c)) => {
                    let wg = w.backward(&g, c, self.frozen_bound_grad)?;
                    let input = wg.input.clone();
                    grads[idx] = LayerGrads::Weight(wg);
                    input
                }
                (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) => {
                    let bg = bn.backward(&g, c)?;
                    let input = bg.input.clone();
                    grads[idx] = LayerGrads::BatchNorm(bg);
                    input
                }
                (Layer::Relu, LayerCache::Relu(mask)) => relu_backward(&g, mask)?,
                (Layer::MaxPool(_), LayerCache::MaxPool { argmax, input_shape }) => {
                    maxpool_backward(&g, argmax, input_shape)?
                }
                (Layer::Flatten, LayerCache::Flatten { input_shape }) => g.reshape(input_shape)?,
                _ => {
                    return Err(Error::Invariant(format!(
                        "cache for layer {idx} does not match the layer kind"
                    )))
                }
            };
        }
        Ok(ModelGrads { layers: grads })
    }

    /// Forward, loss and backward on one labelled batch.
    pub fn loss_and_grads(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<(T, ModelGrads<T>)> {
        let (logits, caches) = self.forward(x, Mode::Train)?;
        let (loss, g) = cross_entropy(&logits, labels)?;
        let grads = self.backward(&g, &caches)?;
        Ok((loss, grads))
    }

    /// One optimizer step on every parameter. Frozen weights are left untouched.
    pub fn sgd_step(&mut self, grads: &ModelGrads<T>, cfg: &SgdConfig) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::dim("sgd_step", &[grads.layers.len()], &[self.layers.len()]));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            match (layer, g) {
                (Layer::Weight(w), LayerGrads::Weight(g)) => {
                    let p = &mut w.params;
                    sgd_step(
                        p.weight.data_mut(),
                        g.weight.data(),
                        &mut p.weight_velocity,
                        Some(&p.frozen),
                        cfg,
                    )?;
                    sgd_step(p.bias.data_mut(), &g.bias, &mut p.bias_velocity, None, cfg)?;
                    if let Some(q) = w.quant.as_mut() {
                        let wb = &mut q.weight_bounds;
                        sgd_step_bounds(&mut wb.bounds, g.weight_bounds, &mut wb.velocity, cfg)?;
                        let ab = &mut q.act_bounds;
                        sgd_step_bounds(&mut ab.bounds, g.act_bounds, &mut ab.velocity, cfg)?;
                    }
                }
                (Layer::BatchNorm(bn), LayerGrads::BatchNorm(g)) => {
                    sgd_step(&mut bn.gamma, &g.gamma, &mut bn.gamma_velocity, None, cfg)?;
                    sgd_step(&mut bn.beta, &g.beta, &mut bn.beta_velocity, None, cfg)?;
                }
                (_, LayerGrads::None) => {}
                _ => return Err(Error::Invariant("gradient kind does not match layer".into())),
            }
        }
        Ok(())
    }

    /// EMA-distance update and freezing for every quantized layer at rate `p`.
    pub fn scheduler_update(&mut self, momentum: f64, rate: f64) -> Result<Vec<LayerFreezeStats>> {
        let mut out = Vec::new();
        for (idx, w) in self.weight_layers_mut() {
            let Some(q) = w.quant.as_mut() else { continue };
            let (normalized, levels) =
                observe_weights(&w.params.weight, &q.weight_bounds.bounds, q.bits)?;
            let distance = level_distance(&normalized, &levels, q.bits)?;
            let ema = q
                .freeze
                .ema_update(distance.data(), &levels, momentum, &w.params.frozen)?;
            q.freeze.set_rate(rate);
            let newly = q.freeze.freeze_step(&mut w.params.frozen);
            w.params.freeze(&newly);
            out.push(LayerFreezeStats {
                layer: idx,
                ema,
                newly_frozen: newly.len(),
                frozen: w.params.frozen_count(),
                total: w.params.weight.numel(),
                threshold: q.freeze.threshold,
            });
        }
        Ok(out)
    }

    /// Current level index of every quantized weight, per quantized layer.
    pub fn level_snapshot(&self) -> Result<Vec<(usize, Vec<u8>)>> {
        self.quantized_layers()
            .map(|(idx, w)| {
                let q = w.quant.as_ref().expect("quantized");
                let (_, levels) = observe_weights(&w.params.weight, &q.weight_bounds.bounds, q.bits)?;
                Ok((idx, levels))
            })
            .collect()
    }

    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(x, Mode::Eval)?;
        let classes = logits.dim(1);
        Ok(logits
            .data()
            .chunks_exact(classes)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}
