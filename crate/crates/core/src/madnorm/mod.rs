//! Mean-absolute-deviation normalization.
//!
//! `y_i = (x_i - mu) / d` with `d = (1/H) sum |x_i - mu|`. The integer path
//! computes the mean, the centered values, the deviation and the output as
//! four 8-bit quantized tensors, each with one rounding.

pub mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{self, DualMultiplier, FixedPointScalar};
use crate::quant::{Observer, QuantParams, Requantizer};
use crate::tensor::QTensor;

/// LayerNorm epsilon, added to the variance under the square root.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Fraction bits are capped so that `den << F` stays inside 128 bits.
const MAX_DIV_FRACTION_BITS: u32 = 62;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mu: f64,
    pub d: f64,
    pub sigma_std: f64,
    pub h: usize,
}

impl NormStats {
    /// Two-pass statistics of `x`: mean, then absolute and squared deviations.
    pub fn of(x: &[f64]) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Empty("normalization input"));
        }
        let h = x.len();
        let n = h as f64;
        let mu = x.iter().sum::<f64>() / n;
        let d = x.iter().map(|v| (v - mu).abs()).sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        Ok(Self {
            mu,
            d,
            sigma_std: var.sqrt(),
            h,
        })
    }
}

/// `(x_i - mu) / sqrt(var + eps)`.
pub fn layernorm_ref(x: &[f64]) -> Result<Vec<f64>> {
    let s = NormStats::of(x)?;
    let denom = (s.sigma_std * s.sigma_std + LAYERNORM_EPS).sqrt();
    Ok(x.iter().map(|v| (v - s.mu) / denom).collect())
}

/// `(x_i - mu) / d`, or all zeros when `d = 0`.
pub fn madnorm_ref(x: &[f64]) -> Result<Vec<f64>> {
    let s = NormStats::of(x)?;
    if s.d == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    Ok(x.iter().map(|v| (v - s.mu) / s.d).collect())
}

/// Optional per-channel `gamma * y + beta`.
pub fn affine(y: &[f64], gamma: Option<&[f64]>, beta: Option<&[f64]>) -> Vec<f64> {
    y.iter()
        .enumerate()
        .map(|(i, v)| v * gamma.map_or(1.0, |g| g[i]) + beta.map_or(0.0, |b| b[i]))
        .collect()
}

/// The real-valued intermediates the integer path quantizes: mean, centered
/// values, deviation and (affine-transformed) output.
#[derive(Debug, Clone, PartialEq)]
pub struct MadNormTrace {
    pub mu: f64,
    pub xhat: Vec<f64>,
    pub d: f64,
    pub y: Vec<f64>,
}

pub fn madnorm_trace(x: &[f64], gamma: Option<&[f64]>, beta: Option<&[f64]>) -> Result<MadNormTrace> {
    let s = NormStats::of(x)?;
    let xhat: Vec<f64> = x.iter().map(|v| v - s.mu).collect();
    let y = if s.d == 0.0 {
        vec![0.0; x.len()]
    } else {
        xhat.iter().map(|v| v / s.d).collect()
    };
    Ok(MadNormTrace {
        mu: s.mu,
        d: s.d,
        y: affine(&y, gamma, beta),
        xhat,
    })
}

/// Calibration observers for one normalization site.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MadNormObserver {
    pub mu: Observer,
    pub xhat: Observer,
    pub d: Observer,
    pub y: Observer,
}

impl MadNormObserver {
    pub fn observe(&mut self, t: &MadNormTrace) {
        self.mu.observe_one(t.mu);
        self.xhat.observe(&t.xhat);
        self.d.observe_one(t.d);
        self.y.observe(&t.y);
    }

    pub fn merge(&mut self, other: &MadNormObserver) {
        self.mu.merge(&other.mu);
        self.xhat.merge(&other.xhat);
        self.d.merge(&other.d);
        self.y.merge(&other.y);
    }

    /// `[p_mu, p_xhat, p_d, p_y]` at 8 bits.
    pub fn finalize(&self) -> Result<[QuantParams; 4]> {
        Ok([
            self.mu.finalize(8)?,
            self.xhat.finalize(8)?,
            self.d.finalize(8)?,
            self.y.finalize(8)?,
        ])
    }
}

/// Frozen integer MadNorm for a fixed width `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QMadNormRecord", into = "QMadNormRecord")]
pub struct QMadNorm {
    h: usize,
    p_x: QuantParams,
    p_mu: QuantParams,
    p_xhat: QuantParams,
    p_d: QuantParams,
    p_y: QuantParams,
    gamma: Option<Vec<f64>>,
    beta: Option<Vec<f64>>,
    mean_rq: Requantizer,
    center: DualMultiplier,
    dev_rq: Requantizer,
    out_scale: Vec<FixedPointScalar>,
    out_shift: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
struct QMadNormRecord {
    h: usize,
    p_x: QuantParams,
    p_mu: QuantParams,
    p_xhat: QuantParams,
    p_d: QuantParams,
    p_y: QuantParams,
    gamma: Option<Vec<f64>>,
    beta: Option<Vec<f64>>,
    mean_rq: Requantizer,
    center: DualMultiplier,
    dev_rq: Requantizer,
    out_fraction_bits: u32,
    out_scale: Vec<i64>,
    out_shift: Vec<i64>,
}

impl From<QMadNorm> for QMadNormRecord {
    fn from(n: QMadNorm) -> Self {
        QMadNormRecord {
            out_fraction_bits: n.out_scale.first().map_or(0, |f| f.fraction_bits),
            out_scale: n.out_scale.iter().map(|f| f.raw).collect(),
            h: n.h,
            p_x: n.p_x,
            p_mu: n.p_mu,
            p_xhat: n.p_xhat,
            p_d: n.p_d,
            p_y: n.p_y,
            gamma: n.gamma,
            beta: n.beta,
            mean_rq: n.mean_rq,
            center: n.center,
            dev_rq: n.dev_rq,
            out_shift: n.out_shift,
        }
    }
}

impl TryFrom<QMadNormRecord> for QMadNorm {
    type Error = Error;

    fn try_from(r: QMadNormRecord) -> Result<Self> {
        if r.out_scale.len() != r.h || r.out_shift.len() != r.h {
            return Err(Error::Malformed("MadNorm channel constants".into()));
        }
        Ok(QMadNorm {
            out_scale: r
                .out_scale
                .iter()
                .map(|&v| FixedPointScalar::from_raw(v, r.out_fraction_bits))
                .collect(),
            h: r.h,
            p_x: r.p_x,
            p_mu: r.p_mu,
            p_xhat: r.p_xhat,
            p_d: r.p_d,
            p_y: r.p_y,
            gamma: r.gamma,
            beta: r.beta,
            mean_rq: r.mean_rq,
            center: r.center,
            dev_rq: r.dev_rq,
            out_shift: r.out_shift,
        })
    }
}

impl QMadNorm {
    /// `params` is `[p_mu, p_xhat, p_d, p_y]`. `gamma` and `beta` default to
    /// the identity and are folded into the output constants.
    pub fn new(
        h: usize,
        p_x: QuantParams,
        params: [QuantParams; 4],
        gamma: Option<Vec<f64>>,
        beta: Option<Vec<f64>>,
    ) -> Result<Self> {
        if h == 0 {
            return Err(Error::Empty("normalization width"));
        }
        for v in [&gamma, &beta].into_iter().flatten() {
            if v.len() != h {
                return Err(Error::ShapeMismatch {
                    expected: vec![h],
                    actual: vec![v.len()],
                });
            }
        }
        let [p_mu, p_xhat, p_d, p_y] = params;
        let n = h as f64;
        let mean_rq = Requantizer::new(p_x.scale / (p_mu.scale * n), &p_mu)?;
        let center = DualMultiplier::new(p_x.scale / p_xhat.scale, -p_mu.scale / p_xhat.scale)?;
        let dev_rq = Requantizer::new(p_xhat.scale / (p_d.scale * n), &p_d)?;

        let base = p_xhat.scale / (p_y.scale * p_d.scale);
        let gains: Vec<f64> = (0..h)
            .map(|i| base * gamma.as_ref().map_or(1.0, |g| g[i]))
            .collect();
        let offsets: Vec<f64> = (0..h)
            .map(|i| beta.as_ref().map_or(0.0, |b| b[i]) / p_y.scale)
            .collect();
        let big = gains
            .iter()
            .chain(&offsets)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let fb = if big > 0.0 {
            (fixedpoint::REQUANT_FRACTION_BITS as i32 - big.log2().ceil() as i32)
                .clamp(0, MAX_DIV_FRACTION_BITS as i32) as u32
        } else {
            fixedpoint::REQUANT_FRACTION_BITS
        };
        let out_scale = gains
            .iter()
            .map(|&g| fixedpoint::to_fixed(g, fb))
            .collect::<Result<Vec<_>>>()?;
        let out_shift = offsets
            .iter()
            .map(|&o| fixedpoint::to_fixed(o, fb).map(|f| f.raw))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            h,
            p_x,
            p_mu,
            p_xhat,
            p_d,
            p_y,
            gamma,
            beta,
            mean_rq,
            center,
            dev_rq,
            out_scale,
            out_shift,
        })
    }

    pub fn width(&self) -> usize {
        self.h
    }

    pub fn in_params(&self) -> &QuantParams {
        &self.p_x
    }

    pub fn out_params(&self) -> &QuantParams {
        &self.p_y
    }

    /// `[p_mu, p_xhat, p_d, p_y]`.
    pub fn params(&self) -> [QuantParams; 4] {
        [self.p_mu, self.p_xhat, self.p_d, self.p_y]
    }

    pub fn gamma(&self) -> Option<&[f64]> {
        self.gamma.as_deref()
    }

    pub fn beta(&self) -> Option<&[f64]> {
        self.beta.as_deref()
    }

    /// Integer mean, centered values and deviation, in that order.
    pub fn intermediates(&self, qx: &QTensor) -> Result<(i64, Vec<i64>, i64)> {
        if qx.len() != self.h {
            return Err(Error::ShapeMismatch {
                expected: vec![self.h],
                actual: qx.shape().to_vec(),
            });
        }
        if qx.params() != &self.p_x {
            return Err(Error::InvalidArgument(
                "MadNorm input parameters differ from calibration".into(),
            ));
        }
        let zx = self.p_x.zero_point;
        let sum: i64 = qx.data().iter().map(|&q| q as i64).sum();
        let q_mu = self.mean_rq.apply(sum - self.h as i64 * zx);

        let zmu = self.p_mu.zero_point;
        let zc = self.p_xhat.zero_point;
        let cmax = self.p_xhat.qmax();
        let q_xhat: Vec<i64> = qx
            .data()
            .iter()
            .map(|&q| (self.center.apply(q as i64 - zx, q_mu - zmu) + zc).clamp(0, cmax))
            .collect();

        let abs_sum: i32 = q_xhat.iter().map(|&q| (q - zc).abs() as i32).sum();
        let q_d = self.dev_rq.apply(abs_sum as i64);
        Ok((q_mu, q_xhat, q_d))
    }

    pub fn apply(&self, qx: &QTensor) -> Result<QTensor> {
        let (_, q_xhat, q_d) = self.intermediates(qx)?;
        let den = (q_d - self.p_d.zero_point).max(1) as i128;
        let zc = self.p_xhat.zero_point;
        let data = q_xhat
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                let fx = &self.out_scale[i];
                let num = fx.raw as i128 * (q - zc) as i128 + self.out_shift[i] as i128 * den;
                let r = fixedpoint::round_div(num, den << fx.fraction_bits) as i64;
                self.p_y.saturate(r + self.p_y.zero_point) as u32
            })
            .collect();
        QTensor::new(data, vec![self.h], self.p_y)
    }
}

/// One-shot integer MadNorm with identity affine.
pub fn madnorm_int(
    qx: &QTensor,
    p_mu: QuantParams,
    p_xhat: QuantParams,
    p_d: QuantParams,
    p_y: QuantParams,
) -> Result<QTensor> {
    QMadNorm::new(qx.len(), *qx.params(), [p_mu, p_xhat, p_d, p_y], None, None)?.apply(qx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, derive_params};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_examples() {
        assert_eq!(madnorm_ref(&[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(madnorm_ref(&[2.0, 2.0, 2.0]).unwrap(), vec![0.0; 3]);
        let ln = layernorm_ref(&[1.0, -1.0]).unwrap();
        assert!((ln[0] - 1.0).abs() < 1e-5 && (ln[1] + 1.0).abs() < 1e-5);
        assert_eq!(layernorm_ref(&[3.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(madnorm_ref(&[]).is_err());
    }

    #[test]
    fn layernorm_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mean = x.iter().sum::<f64>() / 50.0;
        let mut var = 0.0;
        for v in &x {
            var += (v - mean).powi(2);
        }
        var /= 50.0;
        let y = layernorm_ref(&x).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert!((a - (b - mean) / (var + 1e-5).sqrt()).abs() < 1e-12);
        }
    }

    fn calibrated(xs: &[Vec<f64>], p_x: QuantParams) -> QMadNorm {
        let mut obs = MadNormObserver::default();
        for x in xs {
            obs.observe(&madnorm_trace(x, None, None).unwrap());
        }
        QMadNorm::new(xs[0].len(), p_x, obs.finalize().unwrap(), None, None).unwrap()
    }

    #[test]
    fn constant_input_gives_zero() {
        let p = derive_params(-1.0, 1.0, 8).unwrap();
        let norm = QMadNorm::new(4, p, [p, p, p, p], None, None).unwrap();
        let qx = QTensor::quantize(&[0.5; 4], vec![4], p).unwrap();
        let y = norm.apply(&qx).unwrap();
        assert!(y.data().iter().all(|&q| q as i64 == p.zero_point));
        let (_, _, q_d) = norm.intermediates(&qx).unwrap();
        assert_eq!(q_d, p.zero_point);
    }

    #[test]
    fn pair_within_three_roundings() {
        let p_x = derive_params(-1.0, 1.0, 8).unwrap();
        let norm = calibrated(&[vec![1.0, -1.0], vec![-1.0, 1.0]], p_x);
        let qx = QTensor::quantize(&[1.0, -1.0], vec![2], p_x).unwrap();
        let y = norm.apply(&qx).unwrap().dequantize();
        let s_y = norm.out_params().scale;
        for (a, b) in y.iter().zip([1.0, -1.0]) {
            assert!((a - b).abs() <= 3.5 * s_y, "{a} vs {b}");
        }
    }

    #[test]
    fn random_vectors_mean_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xs: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..64).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let p_x = derive_params(-2.0, 2.0, 8).unwrap();
        let norm = calibrated(&xs, p_x);
        let s_y = norm.out_params().scale;
        let mut total = 0.0;
        for x in &xs {
            let qx = QTensor::quantize(x, vec![64], p_x).unwrap();
            let y = norm.apply(&qx).unwrap().dequantize();
            let r = madnorm_ref(x).unwrap();
            total += y.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum::<f64>() / 64.0;
        }
        assert!(total / 1000.0 <= 2.0 * s_y, "{} > {}", total / 1000.0, 2.0 * s_y);
    }

    #[test]
    fn affine_folded_into_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma: Vec<f64> = (0..16).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..16).map(|_| rng.random_range(-0.3..0.3)).collect();
        let xs: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let p_x = derive_params(-1.0, 1.0, 8).unwrap();
        let mut obs = MadNormObserver::default();
        for x in &xs {
            obs.observe(&madnorm_trace(x, Some(&gamma), Some(&beta)).unwrap());
        }
        let norm = QMadNorm::new(16, p_x, obs.finalize().unwrap(), Some(gamma.clone()), Some(beta.clone()))
            .unwrap();
        let s_y = norm.out_params().scale;
        let mut total = 0.0;
        for x in &xs {
            let qx = QTensor::quantize(x, vec![16], p_x).unwrap();
            let y = norm.apply(&qx).unwrap().dequantize();
            let r = madnorm_trace(x, Some(&gamma), Some(&beta)).unwrap().y;
            total += y.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum::<f64>() / 16.0;
        }
        assert!(total / 200.0 <= 3.0 * s_y);
        let json = serde_json::to_string(&norm).unwrap();
        assert_eq!(serde_json::from_str::<QMadNorm>(&json).unwrap(), norm);
    }

    #[test]
    fn one_shot_matches_struct() {
        let p = derive_params(-1.0, 1.0, 8).unwrap();
        let pd = derive_params(0.0, 1.0, 8).unwrap();
        let py = derive_params(-3.0, 3.0, 8).unwrap();
        let qx = QTensor::quantize(&[0.1, -0.7, 0.4, 0.9], vec![4], p).unwrap();
        let a = madnorm_int(&qx, p, p, pd, py).unwrap();
        let b = QMadNorm::new(4, p, [p, p, pd, py], None, None).unwrap().apply(&qx).unwrap();
        assert_eq!(a, b);
        let x: Vec<f64> = qx.dequantize();
        let r = madnorm_ref(&x).unwrap();
        for (q, e) in a.data().iter().zip(r) {
            assert!((dequantize(*q as i64, &py) - e).abs() < 0.2);
        }
    }
}
