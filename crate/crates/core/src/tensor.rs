//! Dense row-major tensors and the handful of kernels the engine needs.
//!
//! Every reduction here accumulates in a fixed order so repeated calls on the
//! same inputs are bit-identical. Convolution only ever goes through
//! [`im2col`] followed by [`gemm`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Element type codes shared with the checkpoint format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    U64 = 3,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            3 => Some(DType::U64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
            DType::U64 => 8,
        }
    }
}

/// Floating element type of a run (32-bit for training, 64-bit for gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Round to nearest, ties to even.
    fn round_ties_even(self) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn round_ties_even(self) -> Self {
        f32::round_ties_even(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn round_ties_even(self) -> Self {
        f64::round_ties_even(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Config("tensor rank must be at least 1".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!(
            "tensor extents must be >= 1, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Sum in ascending index order.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.numel() as f64)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", &self.shape, &[0, 0]));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Ok(Self {
            shape: vec![cols, rows],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }
}

/// Population standard deviation, accumulated in f64.
pub fn std_dev<T: Scalar>(values: &[T]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// `a[M×K] · b[K×N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, &a.data, &b.data, &mut c);
    Tensor::new(&[m, n], c)
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 32;

/// `c = a · b` for row-major slices, overwriting `c`.
///
/// Every output element is accumulated in ascending `k` starting from zero,
/// independent of tiling, so the result equals the textbook triple loop
/// bit-for-bit.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let mut j = 0;
    while j < n {
        let width = (n - j).min(TILE_COLS);
        let mut i = 0;
        while i < m {
            let height = (m - i).min(TILE_ROWS);
            if height == TILE_ROWS && width == TILE_COLS {
                tile_full(i, j, k, n, a, b, c);
            } else {
                tile_edge(i, j, height, width, k, n, a, b, c);
            }
            i += height;
        }
        j += width;
    }
}

#[inline(always)]
fn tile_full<T: Scalar>(i: usize, j: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut acc = [[T::zero(); TILE_COLS]; TILE_ROWS];
    let rows: [&[T]; TILE_ROWS] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    for kk in 0..k {
        let brow: &[T; TILE_COLS] = b[kk * n + j..kk * n + j + TILE_COLS]
            .try_into()
            .expect("tile width");
        for r in 0..TILE_ROWS {
            let av = rows[r][kk];
            for l in 0..TILE_COLS {
                acc[r][l] += av * brow[l];
            }
        }
    }
    for r in 0..TILE_ROWS {
        c[(i + r) * n + j..(i + r) * n + j + TILE_COLS].copy_from_slice(&acc[r]);
    }
}

#[allow(clippy::too_many_arguments)]
fn tile_edge<T: Scalar>(
    i: usize,
    j: usize,
    height: usize,
    width: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    for r in i..i + height {
        let out = &mut c[r * n + j..r * n + j + width];
        out.fill(T::zero());
        for kk in 0..k {
            let av = a[r * k + kk];
            let brow = &b[kk * n + j..kk * n + j + width];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D convolution over an `N×C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::dim("conv geometry", input_shape, &[0, 0, 0, 0]));
        }
        let geom = Self {
            batch: input_shape[0],
            channels: input_shape[1],
            height: input_shape[2],
            width: input_shape[3],
            kernel_h,
            kernel_w,
            stride,
            pad,
        };
        geom.validate()?;
        Ok(geom)
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Config(format!(
                "stride and kernel extents must be >= 1: {self:?}"
            )));
        }
        let span_h = self.height + 2 * self.pad;
        let span_w = self.width + 2 * self.pad;
        if span_h < self.kernel_h || span_w < self.kernel_w {
            return Err(Error::Config(format!(
                "kernel {}x{} larger than padded input {span_h}x{span_w}",
                self.kernel_h, self.kernel_w
            )));
        }
        if (span_h - self.kernel_h) % self.stride != 0 || (span_w - self.kernel_w) % self.stride != 0
        {
            return Err(Error::Config(format!(
                "output extent not exact: padded input {span_h}x{span_w}, kernel {}x{}, stride {}",
                self.kernel_h, self.kernel_w, self.stride
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    /// Rows of the unfolded matrix: `C·kh·kw`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the unfolded matrix: `N·H_out·W_out`.
    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    /// Visits every run of in-bounds taps as `(first column, first source
    /// offset, length)`; consecutive taps in a run step the source by `stride`.
    /// Padding positions are never visited.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cols = self.col_cols();
        let plane = self.height * self.width;
        let (s, pad) = (self.stride, self.pad);
        for c in 0..self.channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    // ox range with 0 <= ox·s + kx - pad < width
                    let lo = if pad > kx { (pad - kx).div_ceil(s) } else { 0 };
                    if self.width + pad <= kx {
                        continue;
                    }
                    let hi = ((self.width + pad - kx - 1) / s + 1).min(ow);
                    if lo >= hi {
                        continue;
                    }
                    for n in 0..self.batch {
                        let src_plane = (n * self.channels + c) * plane;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy as usize >= self.height {
                                continue;
                            }
                            let col = row * cols + (n * oh + oy) * ow + lo;
                            let src = src_plane + iy as usize * self.width + lo * s + kx - pad;
                            f(col, src, hi - lo);
                        }
                    }
                }
            }
        }
    }
}

/// Unfold receptive-field patches into columns: `(C·kh·kw) × (N·H_out·W_out)`.
pub fn im2col<T: Scalar>(
    input: &Tensor<T>,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeometry)> {
    let geom = ConvGeometry::new(input.shape(), kernel_h, kernel_w, stride, pad)?;
    Ok((im2col_with(input, &geom)?, geom))
}

pub fn im2col_with<T: Scalar>(input: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    if input.shape() != geom.input_shape() {
        return Err(Error::dim("im2col", input.shape(), &geom.input_shape()));
    }
    let src = input.data();
    let mut out = vec![T::zero(); geom.col_rows() * geom.col_cols()];
    let stride = geom.stride;
    geom.for_each_run(|dst, s, len| {
        let out = &mut out[dst..dst + len];
        if stride == 1 {
            out.copy_from_slice(&src[s..s + len]);
        } else {
            for (i, o) in out.iter_mut().enumerate() {
                *o = src[s + i * stride];
            }
        }
    });
    Tensor::new(&[geom.col_rows(), geom.col_cols()], out)
}

/// Scatter-add inverse of [`im2col`]; overlapping taps sum.
pub fn col2im<T: Scalar>(cols: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let expected = [geom.col_rows(), geom.col_cols()];
    if cols.shape() != expected {
        return Err(Error::dim("col2im", cols.shape(), &expected));
    }
    let src = cols.data();
    let mut out = vec![T::zero(); geom.input_shape().iter().product()];
    let stride = geom.stride;
    geom.for_each_run(|col, s, len| {
        for (i, &v) in src[col..col + len].iter().enumerate() {
            out[s + i * stride] += v;
        }
    });
    Tensor::new(&geom.input_shape(), out)
}

/// `N×C×H×W` → `C × (N·H·W)`.
pub fn to_channel_major<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::dim("to_channel_major", x.shape(), &[0, 0, 0, 0]));
    }
    let [n, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let plane = h * w;
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            out[(ch * n + b) * plane..(ch * n + b + 1) * plane].copy_from_slice(src);
        }
    }
    Tensor::new(&[c, n * plane], out)
}

/// `C × (N·H·W)` → `N×C×H×W`.
pub fn from_channel_major<T: Scalar>(
    x: &Tensor<T>,
    batch: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let plane = height * width;
    if x.rank() != 2 || x.dim(1) != batch * plane {
        return Err(Error::dim(
            "from_channel_major",
            x.shape(),
            &[x.shape()[0], batch * plane],
        ));
    }
    let c = x.dim(0);
    let mut out = vec![T::zero(); x.numel()];
    for ch in 0..c {
        for b in 0..batch {
            let src = &x.data()[(ch * batch + b) * plane..(ch * batch + b + 1) * plane];
            out[(b * c + ch) * plane..(b * c + ch + 1) * plane].copy_from_slice(src);
        }
    }
    Tensor::new(&[batch, c, height, width], out)
}
