use irnn_core::pwl::{quantized_lut, Activation, PwlTable};
use irnn_core::rnn::activation_table;
use irnn_core::{derive_params, QTensor, QuantParams};
use proptest::prelude::*;

fn p8(min: f64, max: f64) -> QuantParams {
    derive_params(min, max, 8).unwrap()
}

fn full(a: Activation) -> PwlTable {
    let (lo, hi) = a.input_range();
    let (olo, ohi) = a.output_range();
    PwlTable::build_full(a.name(), move |x| a.eval(x), p8(lo, hi), p8(olo, ohi)).unwrap()
}

#[test]
fn full_grid_table_is_the_quantized_lut() {
    for a in Activation::ALL {
        let t = full(a);
        assert_eq!(t.pieces(), 255);
        let lut = quantized_lut(|x| a.eval(x), t.in_params(), t.out_params());
        let got: Vec<i64> = (0..=255).map(|q| t.eval_int(q)).collect();
        assert_eq!(got, lut, "{a}");
    }
}

#[test]
fn tensor_apply_matches_scalar_eval() {
    let t = full(Activation::Tanh).reduce(16).unwrap();
    let codes: Vec<i64> = (0..5000).map(|i| (i * 7919) % 256).collect();
    let x = QTensor::from_codes(&codes, vec![codes.len()], *t.in_params()).unwrap();
    let y = t.apply(&x).unwrap();
    for (i, &q) in codes.iter().enumerate() {
        assert_eq!(y.get(i), t.eval_int(q));
    }
}

#[test]
fn linear_function_collapses_to_one_exact_piece() {
    let p = p8(-4.0, 4.0);
    let f = |x: f64| 0.5 * x - 0.25;
    let t = PwlTable::build_full("line", f, p, p8(-2.5, 2.0)).unwrap().reduce(1).unwrap();
    assert_eq!(t.pieces(), 1);
    assert_eq!(t.q_knots(), &[0, 255]);
    assert!(t.max_grid_error(f) < 1e-12);
}

#[test]
fn tanh_error_shrinks_with_more_pieces() {
    let t = full(Activation::Tanh);
    let errs: Vec<f64> = [4, 8, 16, 32]
        .iter()
        .map(|&n| t.reduce(n).unwrap().max_grid_error(f64::tanh))
        .collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
    assert!(errs[2] < errs[0]);
}

#[test]
fn exp_table_over_its_softmax_domain() {
    let p = p8(-10.0, 0.0);
    let t = activation_table("exp", f64::exp, p, 32).unwrap();
    assert_eq!(t.pieces(), 32);
    // measured 0.0132 on the 8-bit grid
    assert!(t.max_grid_error(f64::exp) < 0.015);
    assert_eq!(t.eval_int(p.qmax()), t.out_params().qmax());
}

#[test]
fn tables_survive_serde() {
    let t = full(Activation::Gelu).reduce(24).unwrap();
    let text = serde_json::to_string(&t).unwrap();
    let back: PwlTable = serde_json::from_str(&text).unwrap();
    for q in 0..=255 {
        assert_eq!(back.eval_int(q), t.eval_int(q));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn surviving_knots_are_exact(which in 0usize..5, pieces in 1usize..255) {
        let a = Activation::ALL[which];
        let t = full(a).reduce(pieces).unwrap();
        prop_assert_eq!(t.pieces(), pieces);
        let all = full(a);
        for (&q, &k) in t.q_knots().iter().zip(t.knots()) {
            prop_assert!((t.eval_float(k) - a.eval(k)).abs() < 1e-12);
            prop_assert!((t.eval_int(q) - all.eval_int(q)).abs() <= 1);
        }
    }

    #[test]
    fn fewer_pieces_keep_a_subset_of_knots(pieces in 2usize..128) {
        let t = full(Activation::Sigmoid);
        let big = t.reduce(pieces).unwrap();
        let small = t.reduce(pieces / 2).unwrap();
        prop_assert!(small.q_knots().iter().all(|q| big.q_knots().contains(q)));
    }
}
