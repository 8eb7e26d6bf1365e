use irnn_core::fixedpoint::{fx_apply, round_div, round_shift, to_fixed, format_table};
use irnn_core::quant::{qadd_diff, qadd_same, qmul, Requantizer};
use irnn_core::{derive_params, dequantize, quantize, QuantParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn p8(min: f64, max: f64) -> QuantParams {
    derive_params(min, max, 8).unwrap()
}

/// Scales copied from the hand calculation, rounded to four decimals.
fn hand(min: f64, max: f64, scale: f64, zero_point: i64) -> QuantParams {
    QuantParams::with_scale(min, max, 8, scale, zero_point).unwrap()
}

#[test]
fn worked_examples_are_bit_exact() {
    let u = p8(-1.0, 1.0);
    assert_eq!(quantize(0.2, &u), 154);
    assert!((dequantize(154, &hand(-1.0, 1.0, 0.0078, 128)) - 0.2028).abs() < 1e-12);

    assert_eq!(qmul(25, &u, 117, &p8(0.0, 5.0), &p8(-5.0, 5.0)).unwrap(), 81);
    assert!((dequantize(81, &hand(-5.0, 5.0, 0.0392, 128)) - -1.8424).abs() < 1e-12);

    assert_eq!(qadd_same(90, 218, &u, &p8(-2.0, 2.0)).unwrap(), 154);
    assert!((dequantize(154, &hand(-2.0, 2.0, 0.0157, 128)) - 0.4082).abs() < 1e-12);

    let (pa, pb, pc) = (p8(-1.0, 1.0), p8(0.0, 5.0), p8(-1.0, 6.0));
    assert_eq!((quantize(-0.9, &pa), quantize(3.9, &pb)), (13, 199));
    assert_eq!(pc.zero_point, 36);
    // the hand calculation divides the rounded scales; exact scales give 765/7 = 109.29
    assert_eq!(qadd_diff(13, &pa, 199, &pb, &pc).unwrap(), 145);
    let (ha, hb, hc) = (hand(-1.0, 1.0, 0.0078, 128), hand(0.0, 5.0, 0.0196, 0), hand(-1.0, 6.0, 0.0274, 36));
    assert_eq!(qadd_diff(13, &ha, 199, &hb, &hc).unwrap(), 146);
    assert_eq!(qmul(25, &ha, 117, &hb, &hand(-5.0, 5.0, 0.0392, 128)).unwrap(), 81);
    assert_eq!(qadd_same(90, 218, &ha, &hand(-2.0, 2.0, 0.0157, 128)).unwrap(), 154);
    assert!((dequantize(146, &hand(-1.0, 6.0, 0.0274, 36)) - 3.0140).abs() < 1e-12);
}

#[test]
fn format_table_eight_bits() {
    let rows: Vec<String> = format_table(8).iter().map(|r| r.render()).collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[0], "2^1 | 2.0 | (-256,254) | (0,510)");
    assert_eq!(rows[8], "2^-7 | 0.0078125 | (-1,0.9921875) | (0,1.9921875)");
}

#[test]
fn quantization_error_within_half_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let min = -rng.random_range(0.0..100.0);
        let max = rng.random_range(1e-3..100.0);
        let bits = if rng.random_bool(0.5) { 8 } else { 16 };
        let p = derive_params(min, max, bits).unwrap();
        for _ in 0..10_000 {
            let x = rng.random_range(min..=max);
            let err = (dequantize(quantize(x, &p), &p) - x).abs();
            assert!(err <= p.scale / 2.0 * (1.0 + 1e-9), "{p:?} x={x} err={err}");
        }
    }
}

/// `round(raw * q / 2^f)` through f64, exact while the product stays below 2^53.
fn fx_oracle(raw: i64, f: u32, q: i64) -> i64 {
    let v = raw as f64 * q as f64 / 2f64.powi(f as i32);
    v.round() as i64
}

#[test]
fn fx_apply_matches_float_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let f = rng.random_range(0..24u32);
        let m = rng.random_range(-8.0..8.0);
        let fx = to_fixed(m, f).unwrap();
        let q = rng.random_range(-65_535..=65_535i64);
        let z = rng.random_range(0..=255i64);
        assert_eq!(fx_apply(&fx, q, z).unwrap(), fx_oracle(fx.raw, f, q) + z, "m={m} f={f} q={q}");
    }
}

proptest! {
    #[test]
    fn requantizer_fast_path_matches_wide(m in 1e-6f64..64.0, acc in any::<i32>(), lo in -50.0f64..0.0, hi in 0.01f64..50.0) {
        let rq = Requantizer::new(m, &derive_params(lo, hi, 16).unwrap()).unwrap();
        prop_assert_eq!(rq.apply(acc as i64), rq.apply_wide(acc as i128));
    }

    #[test]
    fn round_shift_is_half_away_from_zero(v in -(1i64 << 52)..(1i64 << 52), f in 1u32..20) {
        let want = (v as f64 / 2f64.powi(f as i32)).round() as i128;
        prop_assert_eq!(round_shift(v as i128, f), want);
    }

    #[test]
    fn round_div_is_half_away_from_zero(num in -(1i64 << 40)..(1i64 << 40), den in 1i64..100_000) {
        let want = (num as f64 / den as f64).round() as i128;
        prop_assert_eq!(round_div(num as i128, den as i128), want);
    }
}
