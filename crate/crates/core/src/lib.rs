//! Quantization-aware training engine that freezes weights once they settle
//! on their quantization level and skips their weight-gradient work.
//!
//! * [`tensor`]: dense tensors, GEMM, im2col/col2im.
//! * [`quant`]: fake quantizer with trainable clipping bounds.
//! * [`nn`]: quantized linear/conv layers, batch norm, loss, SGD.
//! * [`lts`]: EMA-distance tracking, rate schedules, freezing.
//! * [`sparse`]: weight-gradient GEMM that skips frozen positions.

pub mod error;
pub mod lts;
pub mod nn;
pub mod quant;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
