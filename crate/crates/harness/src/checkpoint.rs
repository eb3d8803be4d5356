//! `LTSCKPT1` checkpoints: a magic header followed by named little-endian tensors.
//!
//! Per tensor: `u32` name length, UTF-8 name, `u8` dtype, `u8` rank,
//! `rank × u64` dims, raw data. A checkpoint holds everything needed to
//! resume bit-exactly: parameters, optimizer buffers, batch-norm statistics,
//! quantizer bounds, frozen masks, scheduler state and the iteration counter.

use std::path::Path;

use lts_core::nn::{Layer, Model};
use lts_core::tensor::DType;
use lts_core::{Scalar, Tensor};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"LTSCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::U64(_) => DType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_scalars<T: Scalar>(values: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            _ => TensorData::F64(values.iter().map(|v| v.as_f64()).collect()),
        }
    }

    /// Exact conversion back to `T`; `None` when the stored dtype differs.
    fn to_scalars<T: Scalar>(&self) -> Option<Vec<T>> {
        match (self, T::DTYPE) {
            (TensorData::F32(v), DType::F32) => Some(v.iter().map(|&x| T::of(x as f64)).collect()),
            (TensorData::F64(v), DType::F64) => Some(v.iter().map(|&x| T::of(x)).collect()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(HarnessError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len() as u64,
                msg: format!("{what} needs {n} bytes from offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: TensorData) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u64).collect(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype() as u8);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                TensorData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                TensorData::U8(v) => out.extend_from_slice(v),
                TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            let found = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
            return Err(HarnessError::Version {
                path: path.to_path_buf(),
                msg: format!("magic {found:?}, expected \"LTSCKPT1\""),
            });
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
            path,
        };
        let mut ckpt = Checkpoint::default();
        while r.pos < bytes.len() {
            let start = r.pos;
            let name_len = u32::from_le_bytes(r.take(4, "name length")?.try_into().expect("4")) as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| HarnessError::Format {
                    path: path.to_path_buf(),
                    offset: start as u64 + 4,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(code).ok_or_else(|| HarnessError::Format {
                path: path.to_path_buf(),
                offset: (r.pos - 1) as u64,
                msg: format!("unknown dtype code {code} for '{name}'"),
            })?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(r.take(8, "dimension")?.try_into().expect("8")));
            }
            let count = dims
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d))
                .and_then(|c| usize::try_from(c).ok())
                .and_then(|c| c.checked_mul(dtype.size()).map(|b| (c, b)));
            let Some((count, nbytes)) = count else {
                return Err(HarnessError::Format {
                    path: path.to_path_buf(),
                    offset: start as u64,
                    msg: format!("dimensions {dims:?} of '{name}' overflow"),
                });
            };
            let raw = r.take(nbytes, &format!("data of '{name}'"))?;
            let data = match dtype {
                DType::F32 => TensorData::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                DType::F64 => TensorData::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
                DType::U8 => TensorData::U8(raw.to_vec()),
                DType::U64 => TensorData::U64(
                    raw.chunks_exact(8)
                        .map(|b| u64::from_le_bytes(b.try_into().expect("8")))
                        .collect(),
                ),
            };
            debug_assert_eq!(data.len(), count);
            ckpt.tensors.push(NamedTensor { name, dims, data });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Look up `name` and check its dims, for error reporting against `path`.
    fn expect(&self, path: &Path, name: &str, dims: &[usize]) -> Result<&NamedTensor> {
        let shape_err = |msg: String| HarnessError::Shape {
            path: path.to_path_buf(),
            name: name.to_string(),
            msg,
        };
        let t = self.get(name).ok_or_else(|| shape_err("missing from checkpoint".into()))?;
        let want: Vec<u64> = dims.iter().map(|&d| d as u64).collect();
        if t.dims != want {
            return Err(shape_err(format!("stored {:?}, model expects {want:?}", t.dims)));
        }
        Ok(t)
    }

    fn scalars<T: Scalar>(&self, path: &Path, name: &str, dims: &[usize]) -> Result<Vec<T>> {
        let t = self.expect(path, name, dims)?;
        t.data.to_scalars().ok_or_else(|| HarnessError::Shape {
            path: path.to_path_buf(),
            name: name.to_string(),
            msg: format!("stored dtype {:?}, model uses {:?}", t.data.dtype(), T::DTYPE),
        })
    }

    fn bytes(&self, path: &Path, name: &str, len: usize) -> Result<Vec<u8>> {
        match &self.expect(path, name, &[len])?.data {
            TensorData::U8(v) => Ok(v.clone()),
            other => Err(HarnessError::Shape {
                path: path.to_path_buf(),
                name: name.to_string(),
                msg: format!("stored dtype {:?}, expected U8", other.dtype()),
            }),
        }
    }

    /// A scalar `u64` entry such as the iteration counter.
    pub fn u64_value(&self, path: &Path, name: &str) -> Result<u64> {
        Ok(self.u64_values(path, name, 1)?[0])
    }

    pub fn u64_values(&self, path: &Path, name: &str, len: usize) -> Result<Vec<u64>> {
        match &self.expect(path, name, &[len])?.data {
            TensorData::U64(v) => Ok(v.clone()),
            other => Err(HarnessError::Shape {
                path: path.to_path_buf(),
                name: name.to_string(),
                msg: format!("stored dtype {:?}, expected U64", other.dtype()),
            }),
        }
    }

    /// An `f64` vector entry of known length.
    pub fn f64_values(&self, path: &Path, name: &str, len: usize) -> Result<Vec<f64>> {
        self.scalars::<f64>(path, name, &[len])
    }
}

/// Which parts of the model state [`restore_model`] reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Restore {
    /// Everything [`model_state`] writes.
    Full,
    /// Weights, biases and batch-norm parameters and statistics only, e.g.
    /// initializing a quantized run from a full-precision one.
    Params,
}

fn push_scalars<T: Scalar>(ckpt: &mut Checkpoint, name: String, dims: &[usize], values: &[T]) {
    ckpt.push(name, dims, TensorData::from_scalars(values));
}

/// Append the complete model state to `ckpt`.
pub fn model_state<T: Scalar>(model: &Model<T>, ckpt: &mut Checkpoint) {
    for (idx, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Weight(w) => {
                let p = &w.params;
                let n = p.weight.numel();
                let o = p.bias.numel();
                push_scalars(ckpt, format!("l{idx}.weight"), p.weight.shape(), p.weight.data());
                push_scalars(ckpt, format!("l{idx}.bias"), &[o], p.bias.data());
                push_scalars(ckpt, format!("l{idx}.weight_velocity"), &[n], &p.weight_velocity);
                push_scalars(ckpt, format!("l{idx}.bias_velocity"), &[o], &p.bias_velocity);
                ckpt.push(
                    format!("l{idx}.frozen"),
                    &[n],
                    TensorData::U8(p.frozen.iter().map(|&f| f as u8).collect()),
                );
                if let Some(q) = &w.quant {
                    let wb = &q.weight_bounds;
                    let ab = &q.act_bounds;
                    push_scalars(ckpt, format!("l{idx}.weight_bounds"), &[2], &[wb.bounds.lower, wb.bounds.upper]);
                    push_scalars(ckpt, format!("l{idx}.weight_bounds_velocity"), &[2], &wb.velocity);
                    push_scalars(ckpt, format!("l{idx}.act_bounds"), &[2], &[ab.bounds.lower, ab.bounds.upper]);
                    push_scalars(ckpt, format!("l{idx}.act_bounds_velocity"), &[2], &ab.velocity);
                    push_scalars(ckpt, format!("l{idx}.ema"), &[n], &q.freeze.ema);
                    ckpt.push(format!("l{idx}.q_prev"), &[n], TensorData::U8(q.freeze.last_level.clone()));
                    ckpt.push(
                        format!("l{idx}.rate"),
                        &[2],
                        TensorData::F64(vec![q.freeze.rate, q.freeze.threshold]),
                    );
                }
            }
            Layer::BatchNorm(bn) => {
                let c = bn.channels();
                push_scalars(ckpt, format!("l{idx}.gamma"), &[c], &bn.gamma);
                push_scalars(ckpt, format!("l{idx}.beta"), &[c], &bn.beta);
                push_scalars(ckpt, format!("l{idx}.gamma_velocity"), &[c], &bn.gamma_velocity);
                push_scalars(ckpt, format!("l{idx}.beta_velocity"), &[c], &bn.beta_velocity);
                push_scalars(ckpt, format!("l{idx}.running_mean"), &[c], &bn.running_mean);
                push_scalars(ckpt, format!("l{idx}.running_var"), &[c], &bn.running_var);
            }
            Layer::Relu | Layer::MaxPool(_) | Layer::Flatten => {}
        }
    }
}

/// Load model state written by [`model_state`]. A tensor whose shape or
/// dtype does not match the model is an error naming that tensor.
pub fn restore_model<T: Scalar>(model: &mut Model<T>, ckpt: &Checkpoint, path: &Path, what: Restore) -> Result<()> {
    let full = what == Restore::Full;
    for (idx, layer) in model.layers.iter_mut().enumerate() {
        match layer {
            Layer::Weight(w) => {
                let n = w.params.weight.numel();
                let o = w.params.bias.numel();
                let shape = w.params.weight.shape().to_vec();
                let weight = ckpt.scalars::<T>(path, &format!("l{idx}.weight"), &shape)?;
                w.params.weight = Tensor::new(&shape, weight)?;
                w.params.bias = Tensor::new(&[o], ckpt.scalars::<T>(path, &format!("l{idx}.bias"), &[o])?)?;
                if !full {
                    continue;
                }
                let p = &mut w.params;
                p.weight_velocity = ckpt.scalars(path, &format!("l{idx}.weight_velocity"), &[n])?;
                p.bias_velocity = ckpt.scalars(path, &format!("l{idx}.bias_velocity"), &[o])?;
                p.frozen = ckpt
                    .bytes(path, &format!("l{idx}.frozen"), n)?
                    .into_iter()
                    .map(|b| b != 0)
                    .collect();
                if let Some(q) = w.quant.as_mut() {
                    let wb: Vec<T> = ckpt.scalars(path, &format!("l{idx}.weight_bounds"), &[2])?;
                    q.weight_bounds.bounds.lower = wb[0];
                    q.weight_bounds.bounds.upper = wb[1];
                    let v: Vec<T> = ckpt.scalars(path, &format!("l{idx}.weight_bounds_velocity"), &[2])?;
                    q.weight_bounds.velocity = [v[0], v[1]];
                    let ab: Vec<T> = ckpt.scalars(path, &format!("l{idx}.act_bounds"), &[2])?;
                    q.act_bounds.bounds.lower = ab[0];
                    q.act_bounds.bounds.upper = ab[1];
                    let v: Vec<T> = ckpt.scalars(path, &format!("l{idx}.act_bounds_velocity"), &[2])?;
                    q.act_bounds.velocity = [v[0], v[1]];
                    q.freeze.ema = ckpt.scalars(path, &format!("l{idx}.ema"), &[n])?;
                    q.freeze.last_level = ckpt.bytes(path, &format!("l{idx}.q_prev"), n)?;
                    let rate = ckpt.f64_values(path, &format!("l{idx}.rate"), 2)?;
                    q.freeze.rate = rate[0];
                    q.freeze.threshold = rate[1];
                } else if ckpt.get(&format!("l{idx}.ema")).is_some() {
                    return Err(HarnessError::Shape {
                        path: path.to_path_buf(),
                        name: format!("l{idx}.ema"),
                        msg: "checkpoint layer is quantized, model layer is not".into(),
                    });
                }
            }
            Layer::BatchNorm(bn) => {
                let c = bn.channels();
                bn.gamma = ckpt.scalars(path, &format!("l{idx}.gamma"), &[c])?;
                bn.beta = ckpt.scalars(path, &format!("l{idx}.beta"), &[c])?;
                bn.running_mean = ckpt.scalars(path, &format!("l{idx}.running_mean"), &[c])?;
                bn.running_var = ckpt.scalars(path, &format!("l{idx}.running_var"), &[c])?;
                if full {
                    bn.gamma_velocity = ckpt.scalars(path, &format!("l{idx}.gamma_velocity"), &[c])?;
                    bn.beta_velocity = ckpt.scalars(path, &format!("l{idx}.beta_velocity"), &[c])?;
                }
            }
            Layer::Relu | Layer::MaxPool(_) | Layer::Flatten => {}
        }
    }
    Ok(())
}
