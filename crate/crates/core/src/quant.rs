//! Affine (scale, zero-point) quantization and the integer-only
//! multiply/add primitives built on it.
//!
//! Reals map to unsigned `b`-bit integers via `q = round(x / S) + Z` after
//! clipping `x` to `[min, max]`, and back via `r = S * (q - Z)`. Rounding is
//! to nearest with ties away from zero everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{self, DualMultiplier, FixedPointScalar};

/// Per-tensor quantization descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRecord", into = "ParamsRecord")]
pub struct QuantParams {
    pub min: f64,
    pub max: f64,
    pub bitwidth: u32,
    pub scale: f64,
    pub zero_point: i64,
}

fn check_bitwidth(bitwidth: u32) -> Result<()> {
    match bitwidth {
        8 | 16 | 32 => Ok(()),
        b => Err(Error::UnsupportedBitwidth(b)),
    }
}

/// Largest storable value for an unsigned `bitwidth`-bit integer.
#[inline]
pub fn storage_max(bitwidth: u32) -> i64 {
    (1i64 << bitwidth) - 1
}

/// Derives scale and zero-point for the clipping range `[min, max]`.
pub fn derive_params(min: f64, max: f64, bitwidth: u32) -> Result<QuantParams> {
    check_bitwidth(bitwidth)?;
    if !(min.is_finite() && max.is_finite()) || min > max {
        return Err(Error::InvalidRange { min, max });
    }
    if min == max {
        return Err(Error::DegenerateRange(min));
    }
    if min > 0.0 || max < 0.0 {
        return Err(Error::ZeroExcluded { min, max });
    }
    let qmax = storage_max(bitwidth);
    let scale = (max - min) / qmax as f64;
    let zero_point = ((-min / scale).round() as i64).clamp(0, qmax);
    Ok(QuantParams {
        min,
        max,
        bitwidth,
        scale,
        zero_point,
    })
}

impl QuantParams {
    /// Parameters with an externally fixed scale and zero-point, e.g. values
    /// copied from a hand calculation. Only storage constraints are checked.
    pub fn with_scale(
        min: f64,
        max: f64,
        bitwidth: u32,
        scale: f64,
        zero_point: i64,
    ) -> Result<Self> {
        check_bitwidth(bitwidth)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParams(format!("scale {scale}")));
        }
        if !(0..=storage_max(bitwidth)).contains(&zero_point) {
            return Err(Error::InvalidParams(format!(
                "zero-point {zero_point} outside {bitwidth}-bit storage"
            )));
        }
        if !(min <= 0.0 && 0.0 <= max && min < max) {
            return Err(Error::ZeroExcluded { min, max });
        }
        Ok(Self {
            min,
            max,
            bitwidth,
            scale,
            zero_point,
        })
    }

    /// Unit grid `[0, 2^b - 1]`: `S = 1`, `Z = 0`. Used for tensors whose
    /// observed range collapsed to a single point.
    pub fn unit(bitwidth: u32) -> Result<Self> {
        derive_params(0.0, storage_max(bitwidth) as f64, bitwidth)
    }

    #[inline]
    pub fn qmax(&self) -> i64 {
        storage_max(self.bitwidth)
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> i64 {
        quantize(x, self)
    }

    #[inline]
    pub fn dequantize(&self, q: i64) -> f64 {
        dequantize(q, self)
    }

    #[inline]
    pub fn saturate(&self, q: i64) -> i64 {
        q.clamp(0, self.qmax())
    }

    /// Real values of the lowest and highest storage codes.
    pub fn grid_range(&self) -> (f64, f64) {
        (self.dequantize(0), self.dequantize(self.qmax()))
    }
}

/// Serialized form: the real scale plus its fixed-point pair.
#[derive(Serialize, Deserialize)]
struct ParamsRecord {
    min: f64,
    max: f64,
    bitwidth: u32,
    scale: f64,
    zero_point: i64,
    scale_fx: FixedPointScalar,
}

impl From<QuantParams> for ParamsRecord {
    fn from(p: QuantParams) -> Self {
        let scale_fx =
            fixedpoint::multiplier(p.scale).unwrap_or_else(|_| FixedPointScalar::from_raw(0, 0));
        ParamsRecord {
            min: p.min,
            max: p.max,
            bitwidth: p.bitwidth,
            scale: p.scale,
            zero_point: p.zero_point,
            scale_fx,
        }
    }
}

impl TryFrom<ParamsRecord> for QuantParams {
    type Error = Error;

    fn try_from(r: ParamsRecord) -> Result<Self> {
        QuantParams::with_scale(r.min, r.max, r.bitwidth, r.scale, r.zero_point)
    }
}

/// `q = round(clip(x) / S) + Z`, saturated to storage.
#[inline]
pub fn quantize(x: f64, p: &QuantParams) -> i64 {
    if x.is_nan() {
        return p.zero_point;
    }
    let x = x.clamp(p.min, p.max);
    ((x / p.scale).round() as i64 + p.zero_point).clamp(0, p.qmax())
}

/// `r = S * (q - Z)`.
#[inline]
pub fn dequantize(q: i64, p: &QuantParams) -> f64 {
    p.scale * (q - p.zero_point) as f64
}

/// A precomputed `acc -> saturate(round(M * acc) + Z_out)` step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requantizer {
    pub multiplier: FixedPointScalar,
    pub zero_point: i64,
    pub qmax: i64,
}

impl Requantizer {
    pub fn new(m: f64, out: &QuantParams) -> Result<Self> {
        Ok(Self {
            multiplier: fixedpoint::multiplier(m)?,
            zero_point: out.zero_point,
            qmax: out.qmax(),
        })
    }

    #[inline]
    pub fn apply(&self, acc: i64) -> i64 {
        match self.multiplier.raw.checked_mul(acc) {
            Some(p) => {
                let r = fixedpoint::round_shift_i64(p, self.multiplier.fraction_bits);
                r.saturating_add(self.zero_point).clamp(0, self.qmax)
            }
            None => self.apply_wide(acc as i128),
        }
    }

    #[inline]
    pub fn apply_wide(&self, acc: i128) -> i64 {
        let r = fixedpoint::round_shift(
            self.multiplier.raw as i128 * acc,
            self.multiplier.fraction_bits,
        );
        (r + self.zero_point as i128).clamp(0, self.qmax as i128) as i64
    }
}

/// Precomputed rescaled sum of two differently-quantized operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddRequantizer {
    pub multipliers: DualMultiplier,
    pub zero_a: i64,
    pub zero_b: i64,
    pub zero_point: i64,
    pub qmax: i64,
}

impl AddRequantizer {
    pub fn new(pa: &QuantParams, pb: &QuantParams, pc: &QuantParams) -> Result<Self> {
        Ok(Self {
            multipliers: DualMultiplier::new(pa.scale / pc.scale, pb.scale / pc.scale)?,
            zero_a: pa.zero_point,
            zero_b: pb.zero_point,
            zero_point: pc.zero_point,
            qmax: pc.qmax(),
        })
    }

    #[inline]
    pub fn apply(&self, qa: i64, qb: i64) -> i64 {
        let r = self.multipliers.apply(qa - self.zero_a, qb - self.zero_b);
        (r + self.zero_point).clamp(0, self.qmax)
    }
}

/// Integer-only product of two quantized values, requantized to `pc`.
///
/// The centered product `(qa - Za)(qb - Zb)` expands to
/// `qa*qb - qa*Zb - qb*Za + Za*Zb` and is accumulated in 128 bits before the
/// single rounding step.
pub fn qmul(
    qa: i64,
    pa: &QuantParams,
    qb: i64,
    pb: &QuantParams,
    pc: &QuantParams,
) -> Result<i64> {
    let rq = Requantizer::new(pa.scale * pb.scale / pc.scale, pc)?;
    let acc = (qa - pa.zero_point) as i128 * (qb - pb.zero_point) as i128;
    Ok(rq.apply_wide(acc))
}

/// Sum of two values sharing `p_in`, requantized to `p_out`.
pub fn qadd_same(qa: i64, qb: i64, p_in: &QuantParams, p_out: &QuantParams) -> Result<i64> {
    let rq = Requantizer::new(p_in.scale / p_out.scale, p_out)?;
    Ok(rq.apply(qa + qb - 2 * p_in.zero_point))
}

/// Sum of two values with distinct parameters; both rescale products are
/// accumulated before one rounding.
pub fn qadd_diff(
    qa: i64,
    pa: &QuantParams,
    qb: i64,
    pb: &QuantParams,
    pc: &QuantParams,
) -> Result<i64> {
    Ok(AddRequantizer::new(pa, pb, pc)?.apply(qa, qb))
}

/// Running min/max statistics for calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observer {
    pub running_min: f64,
    pub running_max: f64,
    pub count: u64,
}

impl Default for Observer {
    fn default() -> Self {
        Self::new()
    }
}

impl Observer {
    pub fn new() -> Self {
        Self {
            running_min: f64::INFINITY,
            running_max: f64::NEG_INFINITY,
            count: 0,
        }
    }

    /// Folds a batch into the running extrema. Non-finite values are skipped.
    pub fn observe(&mut self, batch: &[f64]) {
        for &x in batch.iter().filter(|x| x.is_finite()) {
            self.running_min = self.running_min.min(x);
            self.running_max = self.running_max.max(x);
            self.count += 1;
        }
    }

    pub fn observe_one(&mut self, x: f64) {
        self.observe(std::slice::from_ref(&x));
    }

    pub fn merge(&mut self, other: &Observer) {
        self.running_min = self.running_min.min(other.running_min);
        self.running_max = self.running_max.max(other.running_max);
        self.count += other.count;
    }

    /// Freezes the observed range into parameters. Zero is always included;
    /// a range that collapses to `{0}` falls back to [`QuantParams::unit`].
    pub fn finalize(&self, bitwidth: u32) -> Result<QuantParams> {
        if self.count == 0 {
            return Err(Error::Uncalibrated("observer saw no data".into()));
        }
        let lo = self.running_min.min(0.0);
        let hi = self.running_max.max(0.0);
        if lo == hi {
            return QuantParams::unit(bitwidth);
        }
        derive_params(lo, hi, bitwidth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(min: f64, max: f64) -> QuantParams {
        derive_params(min, max, 8).unwrap()
    }

    #[test]
    fn derive_examples() {
        let a = p(-1.0, 1.0);
        assert!((a.scale - 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(a.zero_point, 128);
        assert!((a.scale - 0.0078).abs() < 5e-5);
        let b = p(0.0, 5.0);
        assert!((b.scale - 0.0196).abs() < 5e-5);
        assert_eq!(b.zero_point, 0);
        let c = p(-5.0, 5.0);
        assert!((c.scale - 0.0392).abs() < 5e-5);
        assert_eq!(c.zero_point, 128);
        let d = p(0.0, 255.0);
        assert_eq!((d.scale, d.zero_point), (1.0, 0));
    }

    #[test]
    fn derive_errors() {
        assert_eq!(derive_params(0.0, 0.0, 8), Err(Error::DegenerateRange(0.0)));
        assert!(matches!(
            derive_params(0.5, 1.0, 8),
            Err(Error::ZeroExcluded { .. })
        ));
        assert!(matches!(
            derive_params(-1.0, -0.5, 8),
            Err(Error::ZeroExcluded { .. })
        ));
        assert!(matches!(
            derive_params(-1.0, 1.0, 4),
            Err(Error::UnsupportedBitwidth(4))
        ));
        assert!(derive_params(1.0, -1.0, 8).is_err());
    }

    #[test]
    fn quantize_examples() {
        let u = p(-1.0, 1.0);
        assert_eq!(quantize(0.2, &u), 154);
        // -0.8 / (2/255) = -102 exactly; the hand-worked 25 uses S = 0.0078
        assert_eq!(quantize(-0.8, &u), 26);
        let rounded = QuantParams::with_scale(-1.0, 1.0, 8, 0.0078, 128).unwrap();
        assert_eq!(quantize(-0.8, &rounded), 25);
        assert_eq!(quantize(0.0, &u), u.zero_point);
        assert_eq!(quantize(2.3, &p(0.0, 5.0)), 117);
        assert_eq!(quantize(f64::NAN, &u), 128);
        assert_eq!(dequantize(u.zero_point, &u), 0.0);
    }

    #[test]
    fn dequantize_rounded_scale_example() {
        // the hand-worked values use S rounded to four decimals
        let u = QuantParams::with_scale(-1.0, 1.0, 8, 0.0078, 128).unwrap();
        assert!((dequantize(154, &u) - 0.2028).abs() < 1e-12);
        let z = QuantParams::with_scale(-5.0, 5.0, 8, 0.0392, 128).unwrap();
        assert!((dequantize(81, &z) - (-1.8424)).abs() < 1e-12);
    }

    #[test]
    fn worked_arithmetic_examples() {
        let u = p(-1.0, 1.0);
        let w = p(0.0, 5.0);
        let z = p(-5.0, 5.0);
        assert_eq!(qmul(25, &u, 117, &w, &z).unwrap(), 81);
        let y = p(-2.0, 2.0);
        assert_eq!(qadd_same(90, 218, &u, &y).unwrap(), 154);
        assert_eq!(qadd_same(128, 128, &u, &y).unwrap(), y.zero_point);
    }

    #[test]
    fn qmul_zero_annihilates() {
        let u = p(-1.0, 1.0);
        let w = p(-3.0, 5.0);
        let z = p(-5.0, 5.0);
        for qb in 0..=255 {
            assert_eq!(qmul(u.zero_point, &u, qb, &w, &z).unwrap(), z.zero_point);
        }
    }

    #[test]
    fn qmul_unrepresentable() {
        let big = p(-1e6, 1e6);
        let tiny = p(-1e-6, 1e-6);
        assert!(matches!(
            qmul(1, &big, 1, &big, &tiny),
            Err(Error::MultiplierUnrepresentable(_))
        ));
    }

    #[test]
    fn qadd_diff_identity() {
        let a = p(-1.0, 1.0);
        let b = p(0.0, 5.0);
        let c = p(-1.0, 6.0);
        for qa in (0..=255).step_by(7) {
            let r = dequantize(qadd_diff(qa, &a, b.zero_point, &b, &c).unwrap(), &c);
            let ra = dequantize(qa, &a);
            assert!((r - ra).abs() <= c.scale / 2.0 + a.scale / 2.0 + 1e-12);
        }
    }

    #[test]
    fn observer_examples() {
        let mut o = Observer::new();
        o.observe(&[]);
        assert_eq!(o, Observer::new());
        o.observe(&[0.5, -0.2]);
        assert_eq!((o.running_min, o.running_max), (-0.2, 0.5));
        o.observe(&[1.0]);
        assert_eq!((o.running_min, o.running_max, o.count), (-0.2, 1.0, 3));

        let mut pos = Observer::new();
        pos.observe(&[0.1, 0.3]);
        let params = pos.finalize(8).unwrap();
        assert_eq!(params.min, 0.0);
        assert_eq!(params.zero_point, 0);

        let mut dead = Observer::new();
        dead.observe(&[0.0, 0.0]);
        let params = dead.finalize(8).unwrap();
        assert_eq!((params.scale, params.zero_point), (1.0, 0));

        assert!(matches!(
            Observer::new().finalize(8),
            Err(Error::Uncalibrated(_))
        ));
    }

    #[test]
    fn observer_merge() {
        let mut a = Observer::new();
        a.observe(&[-1.0, 2.0]);
        let mut b = Observer::new();
        b.observe(&[3.0]);
        a.merge(&b);
        assert_eq!((a.running_min, a.running_max, a.count), (-1.0, 3.0, 3));
    }

    #[test]
    fn params_serde_carries_fixed_point_scale() {
        let u = p(-1.0, 1.0);
        let json = serde_json::to_value(u).unwrap();
        assert!(json["scale_fx"]["raw"].is_i64());
        let back: QuantParams = serde_json::from_value(json).unwrap();
        assert_eq!(back, u);
    }

    fn arb_params() -> impl Strategy<Value = QuantParams> {
        (
            -100.0f64..0.0,
            0.0f64..100.0,
            prop::sample::select(vec![8u32, 16]),
        )
            .prop_filter("non-degenerate", |(lo, hi, _)| hi - lo > 1e-6)
            .prop_map(|(lo, hi, b)| derive_params(lo, hi, b).unwrap())
    }

    proptest! {
        #[test]
        fn zero_point_dequantizes_to_zero(p in arb_params()) {
            prop_assert_eq!(dequantize(p.zero_point, &p), 0.0);
            prop_assert!(p.zero_point >= 0 && p.zero_point <= p.qmax());
        }

        #[test]
        fn saturation(p in arb_params(), dx in 0.0f64..1e3) {
            prop_assert_eq!(quantize(p.max + dx, &p), quantize(p.max, &p));
            prop_assert_eq!(quantize(p.min - dx, &p), quantize(p.min, &p));
        }

        #[test]
        fn monotone(p in arb_params(), a in -200.0f64..200.0, b in -200.0f64..200.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo, &p) <= quantize(hi, &p));
        }

        #[test]
        fn round_trip_bound(p in arb_params(), t in 0.0f64..=1.0) {
            let x = p.min + t * (p.max - p.min);
            let err = (dequantize(quantize(x, &p), &p) - x).abs();
            prop_assert!(err <= p.scale / 2.0 * (1.0 + 1e-9));
        }
    }
}
