//! 8-bit matrix-vector products with 32-bit accumulation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{derive_params, Observer, QuantParams, Requantizer};
use crate::tensor::QTensor;

/// Output rows * input columns above which rows are split across threads.
/// The accumulation order inside a row never changes, so results are
/// identical for any thread count.
const PAR_THRESHOLD: usize = 1 << 16;

/// Widest input whose worst-case 8-bit dot product, `cols * 255 * 255`,
/// still fits an `i32` accumulator.
pub const MAX_COLS: usize = (i32::MAX as usize) / (255 * 255);

/// Quantizes a real weight matrix to 8 bits over its own min/max range.
pub fn quantize_weights(w: &[f64], shape: Vec<usize>) -> Result<QTensor> {
    let mut obs = Observer::new();
    obs.observe(w);
    let params = match obs.finalize(8) {
        Ok(p) => p,
        Err(_) => return Err(Error::Empty("weights")),
    };
    QTensor::quantize(w, shape, params)
}

/// `y = requant(W (x - Z_x) + bias)` with `W` stored zero-point-centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QLinearRecord", into = "QLinearRecord")]
pub struct QLinear {
    weight: QTensor,
    bias: Option<Vec<i32>>,
    in_params: QuantParams,
    out_params: QuantParams,
    requant: Requantizer,
    rows: usize,
    cols: usize,
    centered: Vec<i16>,
}

#[derive(Serialize, Deserialize)]
struct QLinearRecord {
    weight: QTensor,
    bias: Option<Vec<i32>>,
    in_params: QuantParams,
    out_params: QuantParams,
    requant: Requantizer,
}

impl From<QLinear> for QLinearRecord {
    fn from(l: QLinear) -> Self {
        QLinearRecord {
            weight: l.weight,
            bias: l.bias,
            in_params: l.in_params,
            out_params: l.out_params,
            requant: l.requant,
        }
    }
}

impl TryFrom<QLinearRecord> for QLinear {
    type Error = Error;

    fn try_from(r: QLinearRecord) -> Result<Self> {
        Self::assemble(r.weight, r.bias, r.in_params, r.out_params, r.requant)
    }
}

impl QLinear {
    /// Builds from an 8-bit weight tensor `[rows, cols]`, an optional bias
    /// already expressed at scale `S_in * S_w`, and the input/output params.
    pub fn new(
        weight: QTensor,
        bias: Option<Vec<i32>>,
        in_params: QuantParams,
        out_params: QuantParams,
    ) -> Result<Self> {
        let m = in_params.scale * weight.params().scale / out_params.scale;
        let requant = Requantizer::new(m, &out_params)?;
        Self::assemble(weight, bias, in_params, out_params, requant)
    }

    /// Quantizes real weights `[rows, cols]` and bias, then builds the layer.
    pub fn from_float(
        w: &[f64],
        rows: usize,
        cols: usize,
        bias: Option<&[f64]>,
        in_params: QuantParams,
        out_params: QuantParams,
    ) -> Result<Self> {
        if w.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, cols],
                actual: vec![w.len()],
            });
        }
        let weight = quantize_weights(w, vec![rows, cols])?;
        let bias_scale = in_params.scale * weight.params().scale;
        let bias = bias.map(|b| {
            b.iter()
                .map(|&v| (v / bias_scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                .collect()
        });
        Self::new(weight, bias, in_params, out_params)
    }

    fn assemble(
        weight: QTensor,
        bias: Option<Vec<i32>>,
        in_params: QuantParams,
        out_params: QuantParams,
        requant: Requantizer,
    ) -> Result<Self> {
        if weight.params().bitwidth != 8 || in_params.bitwidth != 8 {
            return Err(Error::InvalidArgument(
                "matrix products take 8-bit weights and inputs".into(),
            ));
        }
        let (rows, cols) = match weight.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::ShapeMismatch {
                    expected: vec![0, 0],
                    actual: s.to_vec(),
                })
            }
        };
        if cols > MAX_COLS {
            return Err(Error::InvalidArgument(format!(
                "{cols} input columns can overflow the 32-bit accumulator (max {MAX_COLS})"
            )));
        }
        if let Some(b) = &bias {
            if b.len() != rows {
                return Err(Error::ShapeMismatch {
                    expected: vec![rows],
                    actual: vec![b.len()],
                });
            }
        }
        let zw = weight.params().zero_point;
        let centered = weight
            .data()
            .iter()
            .map(|&q| (q as i64 - zw) as i16)
            .collect();
        Ok(Self {
            weight,
            bias,
            in_params,
            out_params,
            requant,
            rows,
            cols,
            centered,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weight(&self) -> &QTensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&[i32]> {
        self.bias.as_deref()
    }

    pub fn in_params(&self) -> &QuantParams {
        &self.in_params
    }

    pub fn out_params(&self) -> &QuantParams {
        &self.out_params
    }

    /// Real-valued weights and bias recovered from the integer storage.
    pub fn dequantized(&self) -> (Vec<f64>, Option<Vec<f64>>) {
        let w = self.weight.dequantize();
        let bs = self.in_params.scale * self.weight.params().scale;
        let b = self
            .bias
            .as_ref()
            .map(|b| b.iter().map(|&v| v as f64 * bs).collect());
        (w, b)
    }

    /// Raw 32-bit accumulators `W (x - Z_x) + bias`, one per output row.
    pub fn accumulate(&self, x: &QTensor) -> Result<Vec<i32>> {
        self.check_input(x)?;
        let xc = self.center_input(x);
        let mut acc = vec![0i32; self.rows];
        self.accumulate_into(&xc, &mut acc);
        Ok(acc)
    }

    pub fn forward(&self, x: &QTensor) -> Result<QTensor> {
        let acc = self.accumulate(x)?;
        let data = acc
            .iter()
            .map(|&a| self.requant.apply(a as i64) as u32)
            .collect();
        QTensor::new(data, vec![self.rows], self.out_params)
    }

    fn check_input(&self, x: &QTensor) -> Result<()> {
        if x.len() != self.cols {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cols],
                actual: x.shape().to_vec(),
            });
        }
        if x.params() != &self.in_params {
            return Err(Error::InvalidArgument(
                "input quantization parameters differ from calibration".into(),
            ));
        }
        Ok(())
    }

    fn center_input(&self, x: &QTensor) -> Vec<i16> {
        let zx = self.in_params.zero_point;
        x.data().iter().map(|&q| (q as i64 - zx) as i16).collect()
    }

    fn accumulate_into(&self, xc: &[i16], acc: &mut [i32]) {
        let row_dot = |r: usize| -> i32 {
            let w = &self.centered[r * self.cols..(r + 1) * self.cols];
            dot_i16(w, xc).saturating_add(self.bias.as_ref().map_or(0, |b| b[r]))
        };
        if self.rows * self.cols >= PAR_THRESHOLD {
            acc.par_iter_mut()
                .enumerate()
                .for_each(|(r, a)| *a = row_dot(r));
        } else {
            for (r, a) in acc.iter_mut().enumerate() {
                *a = row_dot(r);
            }
        }
    }
}

/// Integer dot product in independent lanes. Cannot wrap for inputs up to
/// [`MAX_COLS`] wide; the wrapping ops keep the loop vectorizable when
/// overflow checks are on.
fn dot_i16(a: &[i16], b: &[i16]) -> i32 {
    const LANES: usize = 16;
    let mut acc = [0i32; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(0i32, |s, (&x, &y)| s.wrapping_add((x as i32).wrapping_mul(y as i32)));
    for (x, y) in ca.zip(cb) {
        for k in 0..LANES {
            acc[k] = acc[k].wrapping_add((x[k] as i32).wrapping_mul(y[k] as i32));
        }
    }
    acc.iter().fold(tail, |s, &v| s.wrapping_add(v))
}

/// Real-valued `W x + b` for a row-major `[rows, cols]` matrix.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let dot: f64 = w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum();
            dot + bias.map_or(0.0, |b| b[r])
        })
        .collect()
}

/// Convenience for tests and calibration: the parameter set covering a
/// symmetric range `[-r, r]`.
pub fn symmetric_params(r: f64, bitwidth: u32) -> Result<QuantParams> {
    derive_params(-r, r, bitwidth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::dequantize;

    #[test]
    fn matches_float_product() {
        let w: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) / 10.0).collect();
        let x = [0.5, -0.25, 1.0, 0.0];
        let p_in = symmetric_params(1.0, 8).unwrap();
        let p_out = symmetric_params(2.0, 8).unwrap();
        let lin = QLinear::from_float(&w, 3, 4, Some(&[0.1, -0.2, 0.0]), p_in, p_out).unwrap();
        let qx = QTensor::quantize(&x, vec![4], p_in).unwrap();
        let y = lin.forward(&qx).unwrap();
        let expect = matvec(&w, 3, 4, &x, Some(&[0.1, -0.2, 0.0]));
        for (i, e) in expect.iter().enumerate() {
            let got = dequantize(y.get(i), &p_out);
            assert!((got - e).abs() < 0.03, "{got} vs {e}");
        }
    }

    #[test]
    fn rejects_wrong_input() {
        let p = symmetric_params(1.0, 8).unwrap();
        let lin = QLinear::from_float(&[0.1; 6], 2, 3, None, p, p).unwrap();
        let bad = QTensor::zeros(vec![2], p);
        assert!(matches!(lin.forward(&bad), Err(Error::ShapeMismatch { .. })));
        let other = QTensor::zeros(vec![3], symmetric_params(2.0, 8).unwrap());
        assert!(lin.forward(&other).is_err());
        let p16 = symmetric_params(1.0, 16).unwrap();
        assert!(QLinear::from_float(&[0.1; 6], 2, 3, None, p16, p).is_err());
    }

    #[test]
    fn serde_rebuilds_kernel() {
        let p = symmetric_params(1.0, 8).unwrap();
        let lin = QLinear::from_float(&[0.1, -0.4, 0.3, 0.9], 2, 2, None, p, p).unwrap();
        let json = serde_json::to_string(&lin).unwrap();
        let back: QLinear = serde_json::from_str(&json).unwrap();
        assert_eq!(back, lin);
    }
}
