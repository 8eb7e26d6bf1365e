//! Integer tensors tagged with their quantization parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{dequantize, quantize, QuantParams};

/// Unsigned `b`-bit payload plus the parameters that give it meaning.
///
/// Storage is row-major. Every element fits `params.bitwidth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTensor {
    data: Vec<u32>,
    shape: Vec<usize>,
    params: QuantParams,
}

impl QTensor {
    pub fn new(data: Vec<u32>, shape: Vec<usize>, params: QuantParams) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        let qmax = params.qmax();
        if let Some(&bad) = data.iter().find(|&&v| v as i64 > qmax) {
            return Err(Error::OutOfStorage {
                value: bad as i64,
                bitwidth: params.bitwidth,
            });
        }
        Ok(Self {
            data,
            shape,
            params,
        })
    }

    /// Builds from already-saturated integer codes.
    pub fn from_codes(codes: &[i64], shape: Vec<usize>, params: QuantParams) -> Result<Self> {
        let qmax = params.qmax();
        let data = codes
            .iter()
            .map(|&q| {
                if (0..=qmax).contains(&q) {
                    Ok(q as u32)
                } else {
                    Err(Error::OutOfStorage {
                        value: q,
                        bitwidth: params.bitwidth,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(data, shape, params)
    }

    pub fn quantize(values: &[f64], shape: Vec<usize>, params: QuantParams) -> Result<Self> {
        let data = values
            .iter()
            .map(|&x| quantize(x, &params) as u32)
            .collect();
        Self::new(data, shape, params)
    }

    /// Tensor holding the zero-point everywhere (real value 0).
    pub fn zeros(shape: Vec<usize>, params: QuantParams) -> Self {
        let n = shape.iter().product();
        Self {
            data: vec![params.zero_point as u32; n],
            shape,
            params,
        }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|&q| dequantize(q as i64, &self.params))
            .collect()
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> i64 {
        self.data[i] as i64
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[u32] {
        let cols = *self.shape.last().unwrap_or(&0);
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Splits a `[T, d]` tensor into `T` 1-D tensors.
    pub fn rows(&self) -> Result<Vec<QTensor>> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0],
                actual: self.shape.clone(),
            });
        }
        let cols = self.shape[1];
        Ok((0..self.shape[0])
            .map(|t| QTensor {
                data: self.row(t).to_vec(),
                shape: vec![cols],
                params: self.params,
            })
            .collect())
    }

    /// Stacks equally-sized 1-D tensors sharing parameters into `[T, d]`.
    pub fn stack(rows: &[QTensor]) -> Result<QTensor> {
        let first = rows.first().ok_or(Error::Empty("stack"))?;
        let d = first.len();
        let mut data = Vec::with_capacity(d * rows.len());
        for r in rows {
            if r.params != first.params {
                return Err(Error::ConcatParamsMismatch);
            }
            if r.len() != d {
                return Err(Error::ShapeMismatch {
                    expected: vec![d],
                    actual: vec![r.len()],
                });
            }
            data.extend_from_slice(&r.data);
        }
        Ok(QTensor {
            data,
            shape: vec![rows.len(), d],
            params: first.params,
        })
    }

    /// Concatenates 1-D tensors without rescaling; all parameters must match.
    pub fn concat(parts: &[&QTensor]) -> Result<QTensor> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        if parts.iter().any(|p| p.params != first.params) {
            return Err(Error::ConcatParamsMismatch);
        }
        let data: Vec<u32> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        let n = data.len();
        Ok(QTensor {
            data,
            shape: vec![n],
            params: first.params,
        })
    }

    /// Little-endian payload at the narrowest width holding the bitwidth.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self.params.bitwidth {
            8 => self.data.iter().map(|&v| v as u8).collect(),
            16 => self
                .data
                .iter()
                .flat_map(|&v| (v as u16).to_le_bytes())
                .collect(),
            _ => self.data.iter().flat_map(|&v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(bytes: &[u8], shape: Vec<usize>, params: QuantParams) -> Result<Self> {
        let width = (params.bitwidth / 8) as usize;
        let n: usize = shape.iter().product();
        if bytes.len() != n * width {
            return Err(Error::Malformed(format!(
                "tensor payload of {} bytes, expected {}",
                bytes.len(),
                n * width
            )));
        }
        let data = match width {
            1 => bytes.iter().map(|&b| b as u32).collect(),
            2 => bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect(),
            _ => bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        };
        Self::new(data, shape, params)
    }
}
