//! Q-format fixed-point scalars and the shift/mask rounding used to apply
//! real-valued constants to integer accumulators.
//!
//! A value in `Q{i}.{f}` is stored as an integer `raw` and represents
//! `raw * 2^-f`. Multiplying an integer `q` by such a constant and rounding
//! to the nearest integer is done with
//!
//! ```text
//! (raw * q) >> f  +  ((raw * q) >> (f - 1)) & 1
//! ```
//!
//! evaluated on the magnitude of the product, with the sign reapplied at
//! the end. Right shifts are therefore never performed on negative numbers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction bits used for normalized requantization multipliers.
pub const REQUANT_FRACTION_BITS: u32 = 30;

/// Layout of a fixed-point number: sign bit (optional), integral bits and
/// fraction bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QFormat {
    pub integral_bits: u32,
    pub fraction_bits: u32,
    pub signed: bool,
}

impl QFormat {
    pub const fn signed(integral_bits: u32, fraction_bits: u32) -> Self {
        Self {
            integral_bits,
            fraction_bits,
            signed: true,
        }
    }

    pub const fn unsigned(integral_bits: u32, fraction_bits: u32) -> Self {
        Self {
            integral_bits,
            fraction_bits,
            signed: false,
        }
    }

    /// Total storage width in bits.
    pub fn width(&self) -> u32 {
        self.integral_bits + self.fraction_bits + u32::from(self.signed)
    }

    pub fn resolution(&self) -> f64 {
        pow2(-(self.fraction_bits as i32))
    }

    /// Smallest and largest representable real values.
    pub fn range(&self) -> (f64, f64) {
        let top = pow2(self.integral_bits as i32) - self.resolution();
        if self.signed {
            (-pow2(self.integral_bits as i32), top)
        } else {
            (0.0, top)
        }
    }

    fn raw_bounds(&self) -> (i128, i128) {
        let mag = 1i128 << (self.integral_bits + self.fraction_bits).min(126);
        if self.signed {
            (-mag, mag - 1)
        } else {
            (0, mag - 1)
        }
    }
}

/// A real constant held as `raw * 2^-fraction_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "FxPair", into = "FxPair")]
pub struct FixedPointScalar {
    pub raw: i64,
    pub fraction_bits: u32,
    pub integral_bits: u32,
    pub signed: bool,
}

/// On-disk form: an integer pair, no floating point involved.
#[derive(Serialize, Deserialize)]
struct FxPair {
    raw: i64,
    fraction_bits: u32,
}

impl From<FxPair> for FixedPointScalar {
    fn from(p: FxPair) -> Self {
        FixedPointScalar::from_raw(p.raw, p.fraction_bits)
    }
}

impl From<FixedPointScalar> for FxPair {
    fn from(fx: FixedPointScalar) -> Self {
        FxPair {
            raw: fx.raw,
            fraction_bits: fx.fraction_bits,
        }
    }
}

impl FixedPointScalar {
    /// Wraps a raw integer in the narrowest signed format that holds it.
    pub fn from_raw(raw: i64, fraction_bits: u32) -> Self {
        Self {
            raw,
            fraction_bits,
            integral_bits: min_integral_bits(raw, fraction_bits),
            signed: true,
        }
    }

    pub fn format(&self) -> QFormat {
        QFormat {
            integral_bits: self.integral_bits,
            fraction_bits: self.fraction_bits,
            signed: self.signed,
        }
    }

    pub fn to_float(&self) -> f64 {
        to_float(self)
    }

    pub fn is_zero(&self) -> bool {
        self.raw == 0
    }

    /// `round(self * q) + zero_out`, see [`fx_apply`].
    pub fn apply(&self, q: i64, zero_out: i64) -> Result<i64> {
        fx_apply(self, q, zero_out)
    }
}

fn min_integral_bits(raw: i64, fraction_bits: u32) -> u32 {
    // smallest i with raw in [-2^(i+f), 2^(i+f) - 1]
    let mag = if raw < 0 {
        (-(raw as i128) - 1) as u128
    } else {
        raw as u128
    };
    let needed = 128 - mag.leading_zeros();
    needed.saturating_sub(fraction_bits)
}

#[inline]
fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// `raw = round(2^f * m)` in the narrowest signed format that holds it.
pub fn to_fixed(m: f64, fraction_bits: u32) -> Result<FixedPointScalar> {
    if !m.is_finite() {
        return Err(Error::FixedPointOverflow(format!("non-finite value {m}")));
    }
    let scaled = (m * pow2(fraction_bits as i32)).round();
    if scaled.abs() >= pow2(63) {
        return Err(Error::FixedPointOverflow(format!(
            "{m} with {fraction_bits} fraction bits exceeds 64-bit storage"
        )));
    }
    Ok(FixedPointScalar::from_raw(scaled as i64, fraction_bits))
}

/// Like [`to_fixed`] but rejects values outside an explicit format.
pub fn to_fixed_in(m: f64, format: QFormat) -> Result<FixedPointScalar> {
    let fx = to_fixed(m, format.fraction_bits)?;
    let (lo, hi) = format.raw_bounds();
    let raw = fx.raw as i128;
    if raw < lo || raw > hi {
        return Err(Error::FixedPointOverflow(format!(
            "{m} outside Q{}.{} ({})",
            format.integral_bits,
            format.fraction_bits,
            if format.signed { "signed" } else { "unsigned" }
        )));
    }
    Ok(FixedPointScalar {
        raw: fx.raw,
        fraction_bits: format.fraction_bits,
        integral_bits: format.integral_bits,
        signed: format.signed,
    })
}

/// Exact value `raw * 2^-f` (exact whenever |raw| < 2^53).
pub fn to_float(fx: &FixedPointScalar) -> f64 {
    fx.raw as f64 * pow2(-(fx.fraction_bits as i32))
}

/// Round-to-nearest of `value * 2^-f`, ties away from zero.
///
/// Operates on the magnitude and restores the sign afterwards.
#[inline]
pub fn round_shift(value: i128, f: u32) -> i128 {
    if f == 0 {
        return value;
    }
    let mag = value.unsigned_abs();
    let q = mag.checked_shr(f).unwrap_or(0);
    let half = mag.checked_shr(f - 1).unwrap_or(0) & 1;
    let r = (q + half) as i128;
    if value < 0 {
        -r
    } else {
        r
    }
}

/// [`round_shift`] on 64 bits, for products known to fit.
#[inline]
pub fn round_shift_i64(value: i64, f: u32) -> i64 {
    if f == 0 {
        return value;
    }
    let mag = value.unsigned_abs();
    let q = mag.checked_shr(f).unwrap_or(0);
    let half = mag.checked_shr(f - 1).unwrap_or(0) & 1;
    let r = (q + half) as i64;
    if value < 0 {
        -r
    } else {
        r
    }
}

/// Rounded integer division, ties away from zero. `den` must be positive.
#[inline]
pub fn round_div(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let mag = num.unsigned_abs();
    let d = den as u128;
    let q = (mag + d / 2) / d;
    if num < 0 {
        -(q as i128)
    } else {
        q as i128
    }
}

/// `round(to_float(fx) * q) + zero_out` using only integer shifts and masks.
pub fn fx_apply(fx: &FixedPointScalar, q: i64, zero_out: i64) -> Result<i64> {
    let prod = fx.raw.checked_mul(q).ok_or_else(|| {
        Error::FixedPointOverflow(format!("{} * {} overflows 64 bits", fx.raw, q))
    })?;
    let r = round_shift(prod as i128, fx.fraction_bits) as i64;
    r.checked_add(zero_out)
        .ok_or_else(|| Error::FixedPointOverflow("zero-point add overflows".into()))
}

/// Splits `|m|` into `mant * 2^exp` with `mant` in `[0.5, 1)`.
fn frexp(m: f64) -> (f64, i32) {
    let a = m.abs();
    let mut exp = a.log2().floor() as i32 + 1;
    let mut mant = a / pow2(exp);
    // log2 can be off by one near powers of two
    if mant >= 1.0 {
        exp += 1;
        mant = a / pow2(exp);
    } else if mant < 0.5 {
        exp -= 1;
        mant = a / pow2(exp);
    }
    (mant, exp)
}

/// Normalized requantization multiplier: `m = mant * 2^exp` is stored with
/// `REQUANT_FRACTION_BITS - exp` fraction bits so the raw value always has
/// 30 significant bits.
pub fn multiplier(m: f64) -> Result<FixedPointScalar> {
    if !m.is_finite() {
        return Err(Error::MultiplierUnrepresentable(m));
    }
    if m == 0.0 {
        return Ok(FixedPointScalar::from_raw(0, 0));
    }
    let (_, exp) = frexp(m);
    let f = REQUANT_FRACTION_BITS as i32 - exp;
    if f < 0 {
        return Err(Error::MultiplierUnrepresentable(m));
    }
    if f > 126 {
        // below 2^-96: contributes nothing to any product we form
        return Ok(FixedPointScalar::from_raw(0, 0));
    }
    to_fixed(m, f as u32).map_err(|_| Error::MultiplierUnrepresentable(m))
}

/// Two multipliers sharing one fraction-bit count so that
/// `round(ma * a + mb * b)` is computed with a single rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualMultiplier {
    pub raw_a: i64,
    pub raw_b: i64,
    pub fraction_bits: u32,
}

impl DualMultiplier {
    pub fn new(ma: f64, mb: f64) -> Result<Self> {
        for m in [ma, mb] {
            if !m.is_finite() {
                return Err(Error::MultiplierUnrepresentable(m));
            }
        }
        let big = ma.abs().max(mb.abs());
        if big == 0.0 {
            return Ok(Self {
                raw_a: 0,
                raw_b: 0,
                fraction_bits: 0,
            });
        }
        let (_, exp) = frexp(big);
        let f = REQUANT_FRACTION_BITS as i32 - exp;
        if f < 0 {
            return Err(Error::MultiplierUnrepresentable(big));
        }
        let f = f.min(126) as u32;
        let scale = pow2(f as i32);
        Ok(Self {
            raw_a: (ma * scale).round() as i64,
            raw_b: (mb * scale).round() as i64,
            fraction_bits: f,
        })
    }

    /// `round(ma * a + mb * b)`.
    #[inline]
    pub fn apply(&self, a: i64, b: i64) -> i64 {
        let acc = self.raw_a as i128 * a as i128 + self.raw_b as i128 * b as i128;
        round_shift(acc, self.fraction_bits) as i64
    }

    pub fn values(&self) -> (f64, f64) {
        let s = pow2(-(self.fraction_bits as i32));
        (self.raw_a as f64 * s, self.raw_b as f64 * s)
    }
}

/// One row of the fixed-point format table for a given mantissa width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormatRow {
    /// The scaling factor is `2^scale_exp`.
    pub scale_exp: i32,
    pub precision: f64,
    pub signed_range: (f64, f64),
    pub unsigned_range: (f64, f64),
}

impl FormatRow {
    /// Renders the row as `2^e | precision | (lo,hi) | (lo,hi)`.
    pub fn render(&self) -> String {
        format!(
            "2^{} | {} | ({},{}) | ({},{})",
            self.scale_exp,
            fmt_precision(self.precision),
            self.signed_range.0,
            self.signed_range.1,
            self.unsigned_range.0,
            self.unsigned_range.1
        )
    }
}

fn fmt_precision(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

/// Representable ranges of a `bitwidth`-bit mantissa for scalings
/// `2^1, 2^0, ..., 2^-bitwidth`.
pub fn format_table(bitwidth: u32) -> Vec<FormatRow> {
    let b = bitwidth as i32;
    (-b..=1)
        .rev()
        .map(|e| {
            let s = pow2(e);
            FormatRow {
                scale_exp: e,
                precision: s,
                signed_range: (-pow2(b - 1) * s, (pow2(b - 1) - 1.0) * s),
                unsigned_range: (0.0, (pow2(b) - 1.0) * s),
            }
        })
        .collect()
}
