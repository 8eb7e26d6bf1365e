//! Integer paths against their float references, with bounds frozen from a
//! measurement run.

use irnn_core::attention::{AttentionObservers, AttentionPieces, DenominatorMode, FloatAttention, QAttention};
use irnn_core::model::{toy_attention, toy_model, toy_sequences, IrnnModel, ToySpec};
use irnn_core::rnn::CellConfig;
use irnn_core::QTensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LSTM_TOL_8: f64 = 0.025;
const LSTM_TOL_16: f64 = 0.015;
const CONTEXT_TOL: f64 = 0.03;

fn lstm_max_error(cfg: CellConfig) -> f64 {
    let float = toy_model(ToySpec::default(), 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let calib = toy_sequences(&mut rng, 32, 32, 16);
    let xs = toy_sequences(&mut rng, 1, 32, 16).remove(0);
    let model = IrnnModel::calibrate(&float, cfg, &calib).unwrap();
    let got = model.run(&model.quantize_input(&xs).unwrap()).unwrap().dequantize();
    let want = float.run(&xs).unwrap().concat();
    got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn lstm_8_bit_cell_within_tolerance() {
    let e = lstm_max_error(CellConfig::default());
    assert!(e <= LSTM_TOL_8, "max error {e}");
}

#[test]
fn lstm_16_bit_cell_within_tolerance() {
    let cfg = CellConfig {
        cell_bits: 16,
        preact_bits: 16,
        ..CellConfig::default()
    };
    let e = lstm_max_error(cfg);
    assert!(e <= LSTM_TOL_16, "max error {e}");
}

struct AttentionCase {
    float: FloatAttention,
    int: QAttention,
    rng: ChaCha8Rng,
}

fn attention_case(seed: u64) -> AttentionCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let float = toy_attention(&mut rng, 16, 16, 16);
    let mut obs = AttentionObservers::default();
    for _ in 0..512 {
        let (dec, enc) = query(&mut rng);
        let t = float.trace(&dec, &enc).unwrap();
        obs.observe(&dec, &enc, &t);
    }
    let p_dec = obs.h_dec.finalize(8).unwrap();
    let p_enc = obs.h_enc.finalize(8).unwrap();
    let int = QAttention::calibrate(&float, &obs, p_dec, p_enc, AttentionPieces::default(), DenominatorMode::Int32)
        .unwrap();
    AttentionCase { float, int, rng }
}

fn query(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Vec<f64>>) {
    let enc = toy_sequences(rng, 1, 8, 16).remove(0);
    let dec = toy_sequences(rng, 1, 1, 16).remove(0).remove(0);
    (dec, enc)
}

fn quantize_query(att: &QAttention, dec: &[f64], enc: &[Vec<f64>]) -> (QTensor, QTensor) {
    let qd = QTensor::quantize(dec, vec![dec.len()], *att.dec_params()).unwrap();
    let qe = QTensor::quantize(&enc.concat(), vec![enc.len(), enc[0].len()], *att.enc_params()).unwrap();
    (qd, qe)
}

#[test]
fn attention_context_within_tolerance() {
    let mut case = attention_case(42);
    let mut worst = 0.0f64;
    for _ in 0..32 {
        let (dec, enc) = query(&mut case.rng);
        let (qd, qe) = quantize_query(&case.int, &dec, &enc);
        let (s, _) = case.float.attend(&dec, &enc).unwrap();
        let out = case.int.attend(&qd, &qe).unwrap();
        let e = out.s.dequantize().iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(e);
    }
    assert!(worst <= CONTEXT_TOL, "max context error {worst}");
}

#[test]
fn wide_denominator_beats_8_bit_denominator() {
    let mut wins = 0;
    for seed in 0..10 {
        let mut case = attention_case(seed);
        let narrow = case.int.clone().with_mode(DenominatorMode::Quantized8).unwrap();
        let (mut wide_l1, mut narrow_l1) = (0.0, 0.0);
        for _ in 0..256 {
            let (dec, enc) = query(&mut case.rng);
            let (qd, qe) = quantize_query(&case.int, &dec, &enc);
            let (_, alpha) = case.float.attend(&dec, &enc).unwrap();
            let l1 = |a: &[f64]| a.iter().zip(&alpha).map(|(x, y)| (x - y).abs()).sum::<f64>();
            wide_l1 += l1(&case.int.attend(&qd, &qe).unwrap().alpha);
            narrow_l1 += l1(&narrow.attend(&qd, &qe).unwrap().alpha);
        }
        if wide_l1 < narrow_l1 {
            wins += 1;
        }
    }
    assert!(wins >= 9, "wide denominator won on {wins}/10 seeds");
}

/// Sized past the parallel thresholds: 512x128 gate matrices, 72 encoder steps.
#[test]
fn outputs_do_not_depend_on_thread_count() {
    let spec = ToySpec {
        input_size: 128,
        hidden_size: 128,
        layers: 2,
        bidirectional: true,
        attention: 32,
        ..ToySpec::default()
    };
    let float = toy_model(spec, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let calib = toy_sequences(&mut rng, 8, 16, 128);
    let xs = toy_sequences(&mut rng, 1, 72, 128).remove(0);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let m = IrnnModel::calibrate(&float, CellConfig::default(), &calib).unwrap();
            let y = m.run(&m.quantize_input(&xs).unwrap()).unwrap();
            (m, y)
        })
    };
    let (m1, y1) = run(1);
    let (m4, y4) = run(4);
    assert_eq!(m1, m4);
    assert_eq!(y1, y4);
}
