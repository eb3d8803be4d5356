//! Uniform fake quantizer with trainable clipping bounds.
//!
//! Data is normalized into `[0, 1]` with the bounds `(l, u)`, rounded to one
//! of `2^B` levels and mapped back: weights land in `[-1, 1]`, activations in
//! `[0, 1]`. The backward pass uses the straight-through estimator.

use crate::error::{Error, Result};
use crate::tensor::{std_dev, Scalar, Tensor};

/// Minimum gap kept between the upper and lower bound.
pub const BOUND_EPS: f64 = 1e-6;

/// Quantization bit-width, 2 to 8 bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BitWidth(u8);

impl BitWidth {
    pub fn new(bits: u8) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::Config(format!("bit-width must be in 2..=8, got {bits}")));
        }
        Ok(Self(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// Highest level index, `2^B - 1`.
    pub fn max_level(self) -> u32 {
        (1u32 << self.0) - 1
    }

    /// The freezing interval `2 / 2^B`.
    pub fn interval(self) -> f64 {
        2.0 / (1u32 << self.0) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuantKind {
    Weight,
    Activation,
}

impl QuantKind {
    /// Slope of the dequantizer with respect to the normalized value.
    fn slope(self) -> f64 {
        match self {
            QuantKind::Weight => 2.0,
            QuantKind::Activation => 1.0,
        }
    }
}

/// How gradients reach the clipping bounds from clipped elements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum BoundGradMode {
    /// Exact derivative of the implemented function: clipped elements contribute nothing.
    #[default]
    Literal,
    /// Clipped elements push on the bound they violate, with the in-range slope `k/(u-l)`.
    RouteClipped,
}

/// What happens between normalizing and dequantizing in the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Rounding {
    #[default]
    HalfEven,
    /// No rounding: the straight-through surrogate, for gradient checks.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantConfig {
    pub bits: BitWidth,
    pub kind: QuantKind,
    pub bound_grad: BoundGradMode,
    pub rounding: Rounding,
}

impl QuantConfig {
    pub fn new(bits: BitWidth, kind: QuantKind) -> Self {
        Self {
            bits,
            kind,
            bound_grad: BoundGradMode::Literal,
            rounding: Rounding::HalfEven,
        }
    }

    pub fn interval(&self) -> f64 {
        self.bits.interval()
    }
}

/// Layer-wise clipping bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipBounds<T> {
    pub lower: T,
    pub upper: T,
}

impl<T: Scalar> ClipBounds<T> {
    pub fn new(lower: T, upper: T) -> Result<Self> {
        let b = Self { lower, upper };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.upper > self.lower) {
            return Err(Error::Invariant(format!(
                "clip bounds require u > l, got l={}, u={}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    pub fn span(&self) -> T {
        self.upper - self.lower
    }

    /// Restore `u >= l + eps` after an optimizer step.
    pub fn enforce_order(&mut self) {
        let min_upper = self.lower + T::of(BOUND_EPS);
        if !(self.upper >= min_upper) {
            self.upper = min_upper;
        }
    }
}

/// Everything the backward pass needs from a forward quantization.
#[derive(Clone, Debug)]
pub struct QuantCache<T> {
    pub input: Tensor<T>,
    pub normalized: Tensor<T>,
    pub levels: Vec<u8>,
    pub in_range: Vec<bool>,
    pub bounds: ClipBounds<T>,
    pub config: QuantConfig,
}

/// Result of [`fake_quant_backward`].
#[derive(Clone, Debug)]
pub struct QuantGrads<T> {
    pub input: Tensor<T>,
    pub lower: T,
    pub upper: T,
}

/// `clip((x - l) / (u - l), 0, 1)`.
pub fn normalize<T: Scalar>(x: &Tensor<T>, bounds: &ClipBounds<T>) -> Result<Tensor<T>> {
    bounds.check()?;
    let (l, s) = (bounds.lower, bounds.span());
    Ok(x.map(|v| ((v - l) / s).max(T::zero()).min(T::one())))
}

/// `round((2^B - 1) · x_n)`, ties to even.
pub fn quantize_levels<T: Scalar>(normalized: &Tensor<T>, bits: BitWidth) -> Tensor<T> {
    let scale = T::of(bits.max_level() as f64);
    normalized.map(|v| (v * scale).round_ties_even())
}

pub fn dequantize<T: Scalar>(levels: &Tensor<T>, bits: BitWidth, kind: QuantKind) -> Tensor<T> {
    let scale = T::of(bits.max_level() as f64);
    match kind {
        QuantKind::Weight => {
            let two = T::of(2.0);
            let half = T::of(0.5);
            levels.map(|q| two * (q / scale - half))
        }
        QuantKind::Activation => levels.map(|q| q / scale),
    }
}

/// Quantize then dequantize, keeping a cache for the backward pass.
pub fn fake_quant_forward<T: Scalar>(
    x: &Tensor<T>,
    bounds: &ClipBounds<T>,
    config: &QuantConfig,
) -> Result<(Tensor<T>, QuantCache<T>)> {
    let normalized = normalize(x, bounds)?;
    let levels_f = quantize_levels(&normalized, config.bits);
    let out = match config.rounding {
        Rounding::HalfEven => dequantize(&levels_f, config.bits, config.kind),
        Rounding::Identity => {
            let scale = T::of(config.bits.max_level() as f64);
            dequantize(&normalized.map(|v| v * scale), config.bits, config.kind)
        }
    };
    let levels = levels_f.data().iter().map(|q| q.as_f64() as u8).collect();
    let in_range = x
        .data()
        .iter()
        .map(|&v| v >= bounds.lower && v <= bounds.upper)
        .collect();
    Ok((
        out,
        QuantCache {
            input: x.clone(),
            normalized,
            levels,
            in_range,
            bounds: *bounds,
            config: *config,
        },
    ))
}

/// Straight-through backward of [`fake_quant_forward`].
///
/// Inside the clip range the dequantized value behaves like `k·(x - l)/(u - l)`
/// with `k = 2` for weights and `1` for activations.
pub fn fake_quant_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &QuantCache<T>,
) -> Result<QuantGrads<T>> {
    if grad_out.shape() != cache.input.shape() {
        return Err(Error::dim(
            "fake_quant_backward",
            grad_out.shape(),
            cache.input.shape(),
        ));
    }
    let (l, u) = (cache.bounds.lower, cache.bounds.upper);
    let s = u - l;
    let k = T::of(cache.config.kind.slope());
    let slope = k / s;
    let s2 = s * s;
    let route = cache.config.bound_grad == BoundGradMode::RouteClipped;

    let mut g_x = vec![T::zero(); grad_out.numel()];
    let mut g_l = T::zero();
    let mut g_u = T::zero();
    for (e, (&g, &x)) in grad_out.data().iter().zip(cache.input.data()).enumerate() {
        if cache.in_range[e] {
            g_x[e] = g * slope;
            g_l += g * k * (x - u) / s2;
            g_u += g * k * (-(x - l)) / s2;
        } else if route {
            if x < l {
                g_l += g * slope;
            } else {
                g_u += g * slope;
            }
        }
    }
    Ok(QuantGrads {
        input: Tensor::new(grad_out.shape(), g_x)?,
        lower: g_l,
        upper: g_u,
    })
}

/// Initial bounds: `±3σ` for weights, `[min, max]` for activations.
pub fn init_bounds<T: Scalar>(values: &[T], kind: QuantKind) -> Result<ClipBounds<T>> {
    if values.is_empty() {
        return Err(Error::Config("cannot initialize clip bounds from an empty tensor".into()));
    }
    let mut b = match kind {
        QuantKind::Weight => {
            let sigma = T::of(3.0 * std_dev(values));
            ClipBounds {
                lower: -sigma,
                upper: sigma,
            }
        }
        QuantKind::Activation => ClipBounds {
            lower: values.iter().copied().fold(T::infinity(), T::min),
            upper: values.iter().copied().fold(T::neg_infinity(), T::max),
        },
    };
    b.enforce_order();
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(b: u8) -> BitWidth {
        BitWidth::new(b).unwrap()
    }

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    fn b(l: f64, u: f64) -> ClipBounds<f64> {
        ClipBounds::new(l, u).unwrap()
    }

    #[test]
    fn bit_width_range_and_interval() {
        assert!(BitWidth::new(1).is_err());
        assert!(BitWidth::new(9).is_err());
        assert_eq!(bits(2).interval(), 0.5);
        assert_eq!(bits(4).interval(), 0.125);
        assert_eq!(bits(8).max_level(), 255);
    }

    #[test]
    fn normalize_cases() {
        let n = |l, u, x| normalize(&scalar(x), &b(l, u)).unwrap().data()[0];
        assert_eq!(n(-1.0, 1.0, -1.0), 0.0);
        assert_eq!(n(-1.0, 1.0, 1.0), 1.0);
        assert_eq!(n(-1.0, 1.0, 0.0), 0.5);
        assert_eq!(n(0.0, 2.0, 3.0), 1.0);
        let bad = ClipBounds { lower: 1.0, upper: 1.0 };
        assert!(matches!(normalize(&scalar(0.0), &bad), Err(Error::Invariant(_))));
    }

    #[test]
    fn quantize_levels_cases() {
        let q = |x| quantize_levels(&scalar(x), bits(2)).data()[0];
        assert_eq!(q(0.0), 0.0);
        assert_eq!(q(1.0), 3.0);
        assert_eq!(q(0.4), 1.0);
        assert_eq!(q(0.5), 2.0);
    }

    #[test]
    fn tie_enumeration_matches_half_even() {
        // every tie (2j+1)/2 on the level grid rounds to the even neighbour
        for bw in 2..=8u8 {
            let levels = bits(bw).max_level() as f64;
            for j in 0..bits(bw).max_level() {
                let tie = (2 * j + 1) as f64 / 2.0;
                let q = quantize_levels(&scalar(tie / levels), bits(bw)).data()[0];
                let expected = if j % 2 == 0 { j as f64 } else { (j + 1) as f64 };
                assert_eq!(q, expected, "B={bw} tie={tie}");
            }
        }
    }

    #[test]
    fn dequantize_cases() {
        let d = |q, bw, kind| dequantize(&scalar(q), bits(bw), kind).data()[0];
        assert_eq!(d(0.0, 2, QuantKind::Weight), -1.0);
        assert_eq!(d(3.0, 2, QuantKind::Weight), 1.0);
        assert!((d(1.0, 2, QuantKind::Activation) - 1.0 / 3.0).abs() < 1e-15);
        assert!((d(3.0, 3, QuantKind::Weight) + 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn forward_examples() {
        let w = QuantConfig::new(bits(2), QuantKind::Weight);
        let (y, _) = fake_quant_forward(&scalar(-1.0), &b(-1.0, 1.0), &w).unwrap();
        assert_eq!(y.data()[0], -1.0);

        let a = QuantConfig::new(bits(2), QuantKind::Activation);
        let (y, cache) = fake_quant_forward(&scalar(0.4), &b(0.0, 1.0), &a).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cache.levels, vec![1]);
    }

    #[test]
    fn eight_bit_error_within_half_step() {
        let cfg = QuantConfig::new(bits(8), QuantKind::Weight);
        let bounds = b(-0.7, 0.9);
        let x = Tensor::from_fn(&[257], |i| -1.0 + i as f64 * 0.0078);
        let (y, cache) = fake_quant_forward(&x, &bounds, &cfg).unwrap();
        let half_step = 1.0 / 255.0;
        for (yv, xn) in y.data().iter().zip(cache.normalized.data()) {
            let continuous = 2.0 * (xn - 0.5);
            assert!((yv - continuous).abs() <= half_step + 1e-12);
        }
    }

    #[test]
    fn backward_all_clipped() {
        let cfg = QuantConfig::new(bits(2), QuantKind::Weight);
        let x = Tensor::new(&[3], vec![-5.0, 4.0, 9.0]).unwrap();
        let (_, cache) = fake_quant_forward(&x, &b(-1.0, 1.0), &cfg).unwrap();
        let g = fake_quant_backward(&Tensor::full(&[3], 1.0), &cache).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert_eq!((g.lower, g.upper), (0.0, 0.0));
    }

    #[test]
    fn backward_single_weight() {
        let cfg = QuantConfig::new(bits(2), QuantKind::Weight);
        let (_, cache) = fake_quant_forward(&scalar(0.0), &b(-1.0, 1.0), &cfg).unwrap();
        let g = fake_quant_backward(&scalar(1.0), &cache).unwrap();
        assert_eq!(g.input.data()[0], 1.0);
        assert_eq!(g.lower, -0.5);
        assert_eq!(g.upper, -0.5);
    }

    #[test]
    fn backward_route_clipped_switch() {
        let mut cfg = QuantConfig::new(bits(2), QuantKind::Activation);
        cfg.bound_grad = BoundGradMode::RouteClipped;
        let x = Tensor::new(&[2], vec![-3.0, 5.0]).unwrap();
        let (_, cache) = fake_quant_forward(&x, &b(0.0, 2.0), &cfg).unwrap();
        let g = fake_quant_backward(&Tensor::full(&[2], 1.0), &cache).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert_eq!((g.lower, g.upper), (0.5, 0.5));
    }

    #[test]
    fn backward_shape_mismatch() {
        let cfg = QuantConfig::new(bits(2), QuantKind::Weight);
        let (_, cache) = fake_quant_forward(&scalar(0.0), &b(-1.0, 1.0), &cfg).unwrap();
        assert!(fake_quant_backward(&Tensor::zeros(&[2]), &cache).is_err());
    }

    #[test]
    fn init_bounds_rules() {
        // population std of [-0.1, 0.1] is exactly 0.1
        let w = init_bounds(&[-0.1f64, 0.1], QuantKind::Weight).unwrap();
        assert!((w.lower + 0.3).abs() < 1e-15 && (w.upper - 0.3).abs() < 1e-15);

        let a = init_bounds(&[0.0f64, 0.5, 2.0], QuantKind::Activation).unwrap();
        assert_eq!((a.lower, a.upper), (0.0, 2.0));

        let c = init_bounds(&[0.25f64; 8], QuantKind::Weight).unwrap();
        assert_eq!(c.lower, 0.0);
        assert_eq!(c.upper, BOUND_EPS);

        assert!(init_bounds::<f32>(&[], QuantKind::Weight).is_err());
    }

    #[test]
    fn enforce_order_clamps() {
        let mut bnd = ClipBounds { lower: 1.0f64, upper: 0.5 };
        bnd.enforce_order();
        assert_eq!(bnd.upper, 1.0 + BOUND_EPS);
        assert!(bnd.check().is_ok());
    }
}
