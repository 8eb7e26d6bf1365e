//! Quantization-aware piecewise-linear (PWL) activations.
//!
//! A table approximates `f` by
//!
//! ```text
//! g(x) = a_i (x - k_i) + b_i      for k_i <= x < k_{i+1},   b_i = f(k_i)
//! ```
//!
//! where every knot `k_i` is a point of the quantized input grid. Starting
//! from one knot per grid point (which reproduces the quantized look-up
//! table exactly), [`PwlTable::reduce`] greedily drops the interior knot whose
//! two adjacent slopes are closest until the piece budget is met.
//!
//! The integer path evaluates
//!
//! ```text
//! q_y = round( (S_x a_i / S_y)(q_x - q_{k_i}) + b_i / S_y ) + Z_y
//! ```
//!
//! with both constants held as fixed-point integers sharing one fraction-bit
//! count, so each evaluation is one multiply, one add and one rounding shift.

mod activation;

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use activation::{gelu, sigmoid, Activation};

use crate::error::{Error, Result};
use crate::fixedpoint::{self, FixedPointScalar};
use crate::quant::{dequantize, quantize, QuantParams};
use crate::tensor::QTensor;

/// Largest raw fixed-point constant magnitude, in bits. Keeps every raw value
/// exactly representable as an f64 when it is derived.
const FX_BUDGET_BITS: i32 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PwlRecord", into = "PwlRecord")]
pub struct PwlTable {
    name: String,
    knots: Vec<f64>,
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
    q_knots: Vec<i64>,
    in_params: QuantParams,
    out_params: QuantParams,
    fx_slopes: Vec<FixedPointScalar>,
    fx_intercepts: Vec<FixedPointScalar>,
}

/// Serialized form: quantized knots, exact intercepts, and the fixed-point
/// constants as raw integers. Float knots and slopes are rebuilt on load.
#[derive(Serialize, Deserialize)]
struct PwlRecord {
    name: String,
    in_params: QuantParams,
    out_params: QuantParams,
    q_knots: Vec<i64>,
    intercepts: Vec<f64>,
    fraction_bits: u32,
    fx_slopes: Vec<i64>,
    fx_intercepts: Vec<i64>,
}

impl From<PwlTable> for PwlRecord {
    fn from(t: PwlTable) -> Self {
        PwlRecord {
            fraction_bits: t.fraction_bits(),
            fx_slopes: t.fx_slopes.iter().map(|f| f.raw).collect(),
            fx_intercepts: t.fx_intercepts.iter().map(|f| f.raw).collect(),
            name: t.name,
            in_params: t.in_params,
            out_params: t.out_params,
            q_knots: t.q_knots,
            intercepts: t.intercepts,
        }
    }
}

impl TryFrom<PwlRecord> for PwlTable {
    type Error = Error;

    fn try_from(r: PwlRecord) -> Result<Self> {
        let n = r.q_knots.len();
        if n < 2
            || r.intercepts.len() != n
            || r.fx_slopes.len() != n - 1
            || r.fx_intercepts.len() != n - 1
        {
            return Err(Error::Malformed(format!("PWL table `{}`", r.name)));
        }
        check_knots(&r.q_knots, &r.in_params)?;
        let knots: Vec<f64> = r
            .q_knots
            .iter()
            .map(|&q| dequantize(q, &r.in_params))
            .collect();
        let slopes = slopes_between(&knots, &r.intercepts);
        let fb = r.fraction_bits;
        Ok(PwlTable {
            name: r.name,
            knots,
            slopes,
            intercepts: r.intercepts,
            q_knots: r.q_knots,
            in_params: r.in_params,
            out_params: r.out_params,
            fx_slopes: r
                .fx_slopes
                .iter()
                .map(|&v| FixedPointScalar::from_raw(v, fb))
                .collect(),
            fx_intercepts: r
                .fx_intercepts
                .iter()
                .map(|&v| FixedPointScalar::from_raw(v, fb))
                .collect(),
        })
    }
}

fn slopes_between(knots: &[f64], values: &[f64]) -> Vec<f64> {
    knots
        .windows(2)
        .zip(values.windows(2))
        .map(|(k, v)| (v[1] - v[0]) / (k[1] - k[0]))
        .collect()
}

fn check_knots(q_knots: &[i64], in_params: &QuantParams) -> Result<()> {
    if q_knots.len() < 2 {
        return Err(Error::InvalidArgument("a PWL needs at least two knots".into()));
    }
    if q_knots.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("knots must be strictly increasing".into()));
    }
    let qmax = in_params.qmax();
    if let Some(&bad) = q_knots.iter().find(|&&q| q < 0 || q > qmax) {
        return Err(Error::OutOfStorage {
            value: bad,
            bitwidth: in_params.bitwidth,
        });
    }
    Ok(())
}

/// Quantized look-up table of `f` over the whole input grid:
/// `LUT[q] = quantize(f(dequantize(q)))`.
pub fn quantized_lut(
    f: impl Fn(f64) -> f64,
    in_params: &QuantParams,
    out_params: &QuantParams,
) -> Vec<i64> {
    (0..=in_params.qmax())
        .map(|q| quantize(f(dequantize(q, in_params)), out_params))
        .collect()
}

impl PwlTable {
    /// One knot per quantized input value: `2^b - 1` pieces.
    pub fn build_full(
        name: &str,
        f: impl Fn(f64) -> f64,
        in_params: QuantParams,
        out_params: QuantParams,
    ) -> Result<Self> {
        if in_params.bitwidth > 16 {
            return Err(Error::InvalidArgument(format!(
                "a full-grid PWL needs at most 16 input bits, got {}",
                in_params.bitwidth
            )));
        }
        let q_knots: Vec<i64> = (0..=in_params.qmax()).collect();
        Self::from_knots(name, f, q_knots, in_params, out_params)
    }

    /// Table of `f` through the given quantized knots.
    pub fn from_knots(
        name: &str,
        f: impl Fn(f64) -> f64,
        q_knots: Vec<i64>,
        in_params: QuantParams,
        out_params: QuantParams,
    ) -> Result<Self> {
        check_knots(&q_knots, &in_params)?;
        let knots: Vec<f64> = q_knots.iter().map(|&q| dequantize(q, &in_params)).collect();
        let intercepts = knots
            .iter()
            .map(|&k| {
                let v = f(k);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFiniteActivation(k))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(name, knots, intercepts, q_knots, in_params, out_params)
    }

    fn assemble(
        name: &str,
        knots: Vec<f64>,
        intercepts: Vec<f64>,
        q_knots: Vec<i64>,
        in_params: QuantParams,
        out_params: QuantParams,
    ) -> Result<Self> {
        let slopes = slopes_between(&knots, &intercepts);
        let sx = in_params.scale;
        let sy = out_params.scale;
        let slope_m: Vec<f64> = slopes.iter().map(|a| sx * a / sy).collect();
        let icpt_m: Vec<f64> = intercepts[..slopes.len()].iter().map(|b| b / sy).collect();
        let max_abs = slope_m
            .iter()
            .chain(&icpt_m)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let fb = if max_abs > 0.0 {
            (FX_BUDGET_BITS - max_abs.log2().ceil() as i32).clamp(0, 62) as u32
        } else {
            FX_BUDGET_BITS as u32
        };
        let to_fx = |v: &f64| fixedpoint::to_fixed(*v, fb);
        let fx_slopes = slope_m.iter().map(to_fx).collect::<Result<Vec<_>>>()?;
        let fx_intercepts = icpt_m.iter().map(to_fx).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            knots,
            slopes,
            intercepts,
            q_knots,
            in_params,
            out_params,
            fx_slopes,
            fx_intercepts,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pieces(&self) -> usize {
        self.slopes.len()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn q_knots(&self) -> &[i64] {
        &self.q_knots
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.intercepts
    }

    pub fn in_params(&self) -> &QuantParams {
        &self.in_params
    }

    pub fn out_params(&self) -> &QuantParams {
        &self.out_params
    }

    pub fn fx_slopes(&self) -> &[FixedPointScalar] {
        &self.fx_slopes
    }

    pub fn fx_intercepts(&self) -> &[FixedPointScalar] {
        &self.fx_intercepts
    }

    pub fn fraction_bits(&self) -> u32 {
        self.fx_slopes.first().map_or(0, |f| f.fraction_bits)
    }

    /// Greedy knot removal down to `pieces` pieces.
    ///
    /// Each step removes the interior knot whose adjacent slopes differ the
    /// least (lowest knot on ties) and re-anchors the merged piece on its
    /// endpoint values, so `g(k_i) = f(k_i)` keeps holding at every survivor.
    pub fn reduce(&self, pieces: usize) -> Result<Self> {
        if pieces < 1 || pieces > self.pieces() {
            return Err(Error::InvalidBudget(pieces));
        }
        let keep = greedy_knot_removal(&self.knots, &self.intercepts, pieces);
        let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self::assemble(
            &self.name,
            pick(&self.knots),
            pick(&self.intercepts),
            keep.iter().map(|&i| self.q_knots[i]).collect(),
            self.in_params,
            self.out_params,
        )
    }

    #[inline]
    fn piece_for<T: PartialOrd + Copy>(knots: &[T], x: T) -> usize {
        let n = knots.len() - 1;
        knots.partition_point(|&k| k <= x).saturating_sub(1).min(n - 1)
    }

    /// Float evaluation. Inputs below the first knot clamp to it; inputs at
    /// or past the last knot extend the last piece.
    pub fn eval_float(&self, x: f64) -> f64 {
        if x <= self.knots[0] {
            return self.intercepts[0];
        }
        let i = Self::piece_for(&self.knots, x);
        self.slopes[i] * (x - self.knots[i]) + self.intercepts[i]
    }

    /// Integer-only evaluation of a quantized input.
    #[inline]
    pub fn eval_int(&self, qx: i64) -> i64 {
        let (i, dq) = if qx <= self.q_knots[0] {
            (0, 0)
        } else {
            let i = Self::piece_for(&self.q_knots, qx);
            (i, qx - self.q_knots[i])
        };
        let acc = self.fx_slopes[i].raw as i128 * dq as i128 + self.fx_intercepts[i].raw as i128;
        let r = fixedpoint::round_shift(acc, self.fraction_bits()) as i64;
        self.out_params.saturate(r + self.out_params.zero_point)
    }

    /// Element-wise [`Self::eval_int`] over a tensor. Parallel over elements
    /// for large inputs; the result does not depend on the schedule.
    pub fn apply(&self, x: &QTensor) -> Result<QTensor> {
        if x.params() != &self.in_params {
            return Err(Error::InvalidArgument(format!(
                "PWL `{}` frozen to different input parameters",
                self.name
            )));
        }
        let data: Vec<u32> = if x.len() >= 4096 {
            x.data()
                .par_iter()
                .map(|&q| self.eval_int(q as i64) as u32)
                .collect()
        } else {
            x.data()
                .iter()
                .map(|&q| self.eval_int(q as i64) as u32)
                .collect()
        };
        QTensor::new(data, x.shape().to_vec(), self.out_params)
    }

    /// Largest `|g - f|` over every point of the quantized input grid.
    pub fn max_grid_error(&self, f: impl Fn(f64) -> f64) -> f64 {
        (0..=self.in_params.qmax())
            .map(|q| {
                let x = dequantize(q, &self.in_params);
                (self.eval_float(x) - f(x)).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Diff(f64);

impl Eq for Diff {}

impl PartialOrd for Diff {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Diff {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Indices of the knots that survive greedy removal.
///
/// Runs in `O(K log K)` with a lazily-invalidated heap keyed by
/// `(|slope_left - slope_right|, knot index)` and a doubly linked list of
/// surviving knots.
fn greedy_knot_removal(knots: &[f64], values: &[f64], pieces: usize) -> Vec<usize> {
    let k = knots.len();
    let mut prev: Vec<usize> = (0..k).map(|i| i.wrapping_sub(1)).collect();
    let mut next: Vec<usize> = (1..=k).collect();
    let mut alive = vec![true; k];
    let mut version = vec![0u32; k];
    let slope = |a: usize, b: usize| (values[b] - values[a]) / (knots[b] - knots[a]);
    let key = |p: usize, j: usize, n: usize| Diff((slope(p, j) - slope(j, n)).abs());

    let mut heap = BinaryHeap::with_capacity(k);
    for j in 1..k.saturating_sub(1) {
        heap.push(Reverse((key(j - 1, j, j + 1), j, 0u32)));
    }
    let mut remaining = k - 1;
    while remaining > pieces {
        let Some(Reverse((_, j, ver))) = heap.pop() else {
            break;
        };
        if !alive[j] || ver != version[j] {
            continue;
        }
        alive[j] = false;
        let (p, n) = (prev[j], next[j]);
        next[p] = n;
        prev[n] = p;
        remaining -= 1;
        for m in [p, n] {
            if m != 0 && m != k - 1 {
                version[m] += 1;
                heap.push(Reverse((key(prev[m], m, next[m]), m, version[m])));
            }
        }
    }
    (0..k).filter(|&i| alive[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::derive_params;

    fn p8(lo: f64, hi: f64) -> QuantParams {
        derive_params(lo, hi, 8).unwrap()
    }

    /// Straightforward O(K^2) removal, recomputing every slope difference.
    fn naive_reduce(knots: &[f64], values: &[f64], pieces: usize) -> Vec<usize> {
        let mut keep: Vec<usize> = (0..knots.len()).collect();
        while keep.len() - 1 > pieces {
            let slopes: Vec<f64> = keep
                .windows(2)
                .map(|w| (values[w[1]] - values[w[0]]) / (knots[w[1]] - knots[w[0]]))
                .collect();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for i in 0..slopes.len() - 1 {
                let d = (slopes[i + 1] - slopes[i]).abs();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            keep.remove(best + 1);
        }
        keep
    }

    #[test]
    fn full_table_is_lut() {
        let pin = p8(-1.0, 1.0);
        let pout = p8(-1.0, 1.0);
        let t = PwlTable::build_full("tanh", f64::tanh, pin, pout).unwrap();
        assert_eq!(t.pieces(), 255);
        let lut = quantized_lut(f64::tanh, &pin, &pout);
        for q in 0..=255 {
            assert_eq!(quantize(t.eval_float(dequantize(q, &pin)), &pout), lut[q as usize]);
            assert_eq!(t.eval_int(q), lut[q as usize]);
        }
    }

    #[test]
    fn identity_has_unit_slopes() {
        let p = p8(-2.0, 2.0);
        let t = PwlTable::build_full("id", |x| x, p, p).unwrap();
        assert!(t.slopes().iter().all(|&a| (a - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sigmoid_intercept_at_zero() {
        let pin = p8(-8.0, 8.0);
        let t = PwlTable::build_full("sigmoid", sigmoid, pin, p8(0.0, 1.0)).unwrap();
        let z = pin.zero_point as usize;
        assert_eq!(t.knots()[z], 0.0);
        assert_eq!(t.intercepts()[z], 0.5);
    }

    #[test]
    fn nonfinite_rejected() {
        let p = p8(-1.0, 1.0);
        let err = PwlTable::build_full("inv", |x| 1.0 / x, p, p).unwrap_err();
        assert!(matches!(err, Error::NonFiniteActivation(_)));
        let p32 = derive_params(-1.0, 1.0, 32).unwrap();
        assert!(PwlTable::build_full("tanh", f64::tanh, p32, p).is_err());
    }

    #[test]
    fn reduce_budget_errors_and_noop() {
        let p = p8(-1.0, 1.0);
        let t = PwlTable::build_full("tanh", f64::tanh, p, p).unwrap();
        assert_eq!(t.reduce(0), Err(Error::InvalidBudget(0)));
        assert_eq!(t.reduce(256), Err(Error::InvalidBudget(256)));
        assert_eq!(t.reduce(255).unwrap(), t);
    }

    #[test]
    fn linear_collapses_to_one_piece() {
        let p = p8(-4.0, 4.0);
        let t = PwlTable::build_full("lin", |x| 0.25 * x + 0.5, p, p).unwrap();
        for budget in [1, 3, 10] {
            let r = t.reduce(budget).unwrap();
            assert_eq!(r.pieces(), budget);
            assert!(r.max_grid_error(|x| 0.25 * x + 0.5) < 1e-12);
        }
        let one = t.reduce(1).unwrap();
        assert_eq!(one.q_knots(), &[0, 255]);
    }

    #[test]
    fn most_similar_slopes_merge_first() {
        // knots at q = 0..3 on the unit grid with slopes 1.0, 1.01, 5.0
        let p = p8(0.0, 255.0);
        let ys = [0.0, 1.0, 2.01, 7.01];
        let f = |x: f64| {
            let i = (x.round() as usize).min(3);
            ys[i]
        };
        let t = PwlTable::from_knots("toy", f, vec![0, 1, 2, 3], p, p).unwrap();
        assert_eq!(t.slopes().len(), 3);
        let r = t.reduce(2).unwrap();
        assert_eq!(r.q_knots(), &[0, 2, 3]);
        assert!((r.slopes()[0] - 1.005).abs() < 1e-12);
    }

    #[test]
    fn heap_matches_naive_removal() {
        let pin = p8(-8.0, 8.0);
        let t = PwlTable::build_full("tanh", f64::tanh, pin, p8(-1.0, 1.0)).unwrap();
        for budget in [1, 2, 4, 8, 16, 32, 100] {
            let fast = greedy_knot_removal(t.knots(), t.intercepts(), budget);
            let slow = naive_reduce(t.knots(), t.intercepts(), budget);
            assert_eq!(fast, slow, "budget {budget}");
        }
        let g = PwlTable::build_full("gelu", gelu, p8(-2.0, 2.0), p8(-0.17, 2.0)).unwrap();
        for budget in [4, 5, 9] {
            assert_eq!(
                greedy_knot_removal(g.knots(), g.intercepts(), budget),
                naive_reduce(g.knots(), g.intercepts(), budget)
            );
        }
    }

    #[test]
    fn knots_exact_and_subset() {
        let pin = p8(-8.0, 8.0);
        let full = PwlTable::build_full("tanh", f64::tanh, pin, p8(-1.0, 1.0)).unwrap();
        let r = full.reduce(16).unwrap();
        for (k, q) in r.knots().iter().zip(r.q_knots()) {
            assert_eq!(r.eval_float(*k), k.tanh());
            assert_eq!(*k, dequantize(*q, &pin));
            assert!(full.q_knots().contains(q));
        }
    }

    #[test]
    fn eval_float_matches_linear_scan() {
        use rand::{Rng, SeedableRng};
        let pin = p8(-8.0, 8.0);
        let r = PwlTable::build_full("tanh", f64::tanh, pin, p8(-1.0, 1.0))
            .unwrap()
            .reduce(12)
            .unwrap();
        let k = r.knots();
        let scan = |x: f64| -> f64 {
            // direct sum of indicator-weighted pieces
            let mut acc = 0.0;
            for i in 0..r.pieces() {
                let inside = x >= k[i] && x < k[i + 1];
                if inside {
                    acc += r.slopes()[i] * (x - k[i]) + r.intercepts()[i];
                }
            }
            acc
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let x = rng.random_range(k[0]..k[k.len() - 1]);
            assert!((r.eval_float(x) - scan(x)).abs() < 1e-12);
        }
        let mid = 0.5 * (k[3] + k[4]);
        let lerp = 0.5 * (r.intercepts()[3] + r.intercepts()[4]);
        assert!((r.eval_float(mid) - lerp).abs() < 1e-12);
        // clamping and extrapolation
        assert_eq!(r.eval_float(k[0] - 5.0), r.intercepts()[0]);
        let last = r.pieces() - 1;
        let x = k[last + 1] + 1.0;
        assert!((r.eval_float(x) - (r.slopes()[last] * (x - k[last]) + r.intercepts()[last])).abs() < 1e-12);
    }

    #[test]
    fn eval_int_at_knots() {
        let pin = p8(-8.0, 8.0);
        let pout = p8(-1.0, 1.0);
        let r = PwlTable::build_full("tanh", f64::tanh, pin, pout)
            .unwrap()
            .reduce(16)
            .unwrap();
        for (&q, &k) in r.q_knots().iter().zip(r.knots()) {
            assert!((r.eval_int(q) - quantize(k.tanh(), &pout)).abs() <= 1);
        }
    }

    #[test]
    fn sixteen_bit_input_reduces() {
        let pin = derive_params(-8.0, 8.0, 16).unwrap();
        let pout = p8(0.0, 1.0);
        let t = PwlTable::build_full("sigmoid", sigmoid, pin, pout)
            .unwrap()
            .reduce(96)
            .unwrap();
        assert_eq!(t.pieces(), 96);
        for q in (0..=65535).step_by(97) {
            let x = dequantize(q, &pin);
            let y = dequantize(t.eval_int(q), &pout);
            assert!((y - sigmoid(x)).abs() < 2.0 * pout.scale);
        }
    }

    #[test]
    fn serde_round_trip() {
        let p = p8(-8.0, 8.0);
        let t = PwlTable::build_full("tanh", f64::tanh, p, p8(-1.0, 1.0))
            .unwrap()
            .reduce(8)
            .unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: PwlTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }
}
