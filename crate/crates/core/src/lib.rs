//! Integer-only recurrent network inference.
//!
//! Building blocks, bottom-up:
//!
//! * [`quant`] / [`fixedpoint`]: affine quantization and the integer
//!   requantization arithmetic.
//! * [`pwl`]: quantization-aware piecewise-linear activations.
//! * [`madnorm`]: mean-absolute-deviation normalization.
//! * [`rnn`] and [`attention`]: integer LSTM cells and additive attention,
//!   each with a floating-point reference.
//! * [`model`] / [`model_io`]: calibration, whole-model containers and the
//!   `.irnn` file format.

pub mod attention;
pub mod error;
pub mod fixedpoint;
pub mod linear;
pub mod madnorm;
pub mod model;
pub mod model_io;
pub mod pwl;
pub mod quant;
pub mod rnn;
pub mod tensor;

pub use error::{Error, Result};
pub use fixedpoint::{FixedPointScalar, QFormat};
pub use quant::{derive_params, dequantize, quantize, Observer, QuantParams};
pub use tensor::QTensor;
