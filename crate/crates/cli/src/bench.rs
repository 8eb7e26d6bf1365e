//! Host-CPU timing of one LSTM cell: integer with 8- and 32-piece tables
//! against an `f32` float cell with the same weights.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use irnn_core::model::{toy_model, toy_sequences, FloatLayer, FloatModel, IrnnModel, QLayer, ToySpec};
use irnn_core::model_io;
use irnn_core::rnn::{CellConfig, FloatLstm, QLstmCell};
use irnn_core::QTensor;

use crate::report::{CliError, CliResult, ModelBytes, RunReport};
use crate::BenchArgs;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellStepNs {
    pub float32: f64,
    pub int_pwl8: f64,
    pub int_pwl32: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActivationNs {
    pub float32_sigmoid: f64,
    pub pwl8_sigmoid: f64,
    pub pwl32_sigmoid: f64,
}

/// Medians over the timed runs, after the warm-up runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timings {
    pub input_size: usize,
    pub state_size: usize,
    pub seq_len: usize,
    pub warmup: u64,
    pub runs: u64,
    pub threads: usize,
    pub float_baseline: &'static str,
    pub cell_step_ns: CellStepNs,
    /// Float step time over integer step time.
    pub speedup_pwl8: f64,
    pub speedup_pwl32: f64,
    pub activation_ns_per_element: ActivationNs,
    pub pwl8_not_slower: bool,
}

/// Plain LSTM in `f32`, gate blocks `(i, f, j, o)`.
struct F32Cell {
    n: usize,
    m: usize,
    wx: Vec<f32>,
    wh: Vec<f32>,
    bias: Vec<f32>,
}

fn sigmoid32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Eight independent lanes so the compiler can vectorize without reassociating.
fn dot32(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

impl F32Cell {
    fn new(c: &FloatLstm) -> Self {
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        Self {
            n: c.n,
            m: c.m,
            wx: to32(&c.wx),
            wh: to32(&c.wh),
            bias: c.bias.as_deref().map_or_else(|| vec![0.0; 4 * c.m], to32),
        }
    }

    fn step(&self, x: &[f32], h: &mut [f32], c: &mut [f32], gates: &mut [f32]) {
        let (n, m) = (self.n, self.m);
        for (r, g) in gates.iter_mut().enumerate() {
            let ax = dot32(&self.wx[r * n..(r + 1) * n], x);
            let ah = dot32(&self.wh[r * m..(r + 1) * m], h);
            *g = ax + ah + self.bias[r];
        }
        for u in 0..m {
            let (i, f, j, o) = (gates[u], gates[m + u], gates[2 * m + u], gates[3 * m + u]);
            c[u] = sigmoid32(f) * c[u] + sigmoid32(i) * j.tanh();
            h[u] = sigmoid32(o) * c[u].tanh();
        }
    }
}

fn median_ns(warmup: u64, runs: u64, mut f: impl FnMut()) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let mut t: Vec<f64> = (0..runs)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos() as f64
        })
        .collect();
    t.sort_by(f64::total_cmp);
    let mid = t.len() / 2;
    if t.len().is_multiple_of(2) {
        (t[mid - 1] + t[mid]) / 2.0
    } else {
        t[mid]
    }
}

fn first_cell(model: &IrnnModel) -> &QLstmCell {
    match &model.layers[0] {
        QLayer::Lstm(c) => c,
        QLayer::BiLstm(b) => b.fwd(),
    }
}

fn first_float_cell(model: &FloatModel) -> &FloatLstm {
    match &model.layers[0] {
        FloatLayer::Lstm(c) => c,
        FloatLayer::BiLstm(b) => &b.fwd,
    }
}

/// Times on one thread so the integer and float paths compare per core.
pub fn bench(a: &BenchArgs, seed: u64) -> CliResult<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| bench_single(a, seed))
}

fn bench_single(a: &BenchArgs, seed: u64) -> CliResult<()> {
    let float = match &a.model {
        Some(p) => model_io::load_float_file(p)?,
        None => {
            if a.state == 0 {
                return Err(CliError::Usage("--state must be positive".into()));
            }
            let spec = ToySpec {
                input_size: a.input_size.unwrap_or(a.state),
                hidden_size: a.state,
                ..ToySpec::default()
            };
            toy_model(spec, seed)?
        }
    };
    if a.seq_len == 0 {
        return Err(CliError::Usage("--seq-len must be positive".into()));
    }
    let float = if float.uses_norm() { float.with_madnorm()? } else { float };
    let cell_f = first_float_cell(&float);
    let (n, m) = (cell_f.n, cell_f.m);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calib = toy_sequences(&mut rng, 4, 16, float.input_size);
    let cfg = |pieces| CellConfig {
        use_madnorm: float.uses_norm(),
        pwl_pieces: pieces,
        ..CellConfig::default()
    };
    let m8 = IrnnModel::calibrate(&float, cfg(8), &calib)?;
    let m32 = IrnnModel::calibrate(&float, cfg(32), &calib)?;
    let xs = toy_sequences(&mut rng, 1, a.seq_len, n).remove(0);

    let time_int = |model: &IrnnModel| -> CliResult<f64> {
        let cell = first_cell(model);
        let q = QTensor::quantize(&xs.concat(), vec![xs.len(), n], *cell.in_params())?;
        cell.run_sequence(&q)?;
        Ok(median_ns(a.warmup, a.runs, || {
            black_box(cell.run_sequence(black_box(&q)).ok());
        }) / a.seq_len as f64)
    };
    let int8 = time_int(&m8)?;
    let int32 = time_int(&m32)?;

    let (baseline, float_ns) = if cell_f.norm.is_none() && cell_f.ws.is_none() {
        let cell = F32Cell::new(cell_f);
        let xs32: Vec<Vec<f32>> = xs.iter().map(|x| x.iter().map(|&v| v as f32).collect()).collect();
        let ns = median_ns(a.warmup, a.runs, || {
            let (mut h, mut c, mut g) = (vec![0.0f32; m], vec![0.0f32; m], vec![0.0f32; 4 * m]);
            for x in &xs32 {
                cell.step(black_box(x), &mut h, &mut c, &mut g);
            }
            black_box(&h);
        });
        ("f32", ns / a.seq_len as f64)
    } else {
        let ns = median_ns(a.warmup, a.runs, || {
            let (mut h, mut c) = (vec![0.0; m], vec![0.0; m]);
            for x in &xs {
                if let Ok((h2, c2)) = cell_f.step(black_box(x), &h, &c, None) {
                    h = h2;
                    c = c2;
                }
            }
            black_box(&h);
        });
        ("f64 reference (normalized cell)", ns / a.seq_len as f64)
    };

    let [sig8, ..] = first_cell(&m8).tables();
    let [sig32, ..] = first_cell(&m32).tables();
    let codes: Vec<i64> = (0..4 * m as i64).map(|i| (i * 37) % 256).collect();
    let qg = QTensor::from_codes(&codes, vec![4 * m], *sig8.in_params())?;
    let qg32 = QTensor::from_codes(&codes, vec![4 * m], *sig32.in_params())?;
    let fg: Vec<f32> = qg.dequantize().iter().map(|&v| v as f32).collect();
    let per = (4 * m) as f64;
    let act = ActivationNs {
        float32_sigmoid: median_ns(a.warmup, a.runs, || {
            black_box(fg.iter().map(|&x| sigmoid32(x)).sum::<f32>());
        }) / per,
        pwl8_sigmoid: median_ns(a.warmup, a.runs, || {
            black_box(sig8.apply(black_box(&qg)).ok());
        }) / per,
        pwl32_sigmoid: median_ns(a.warmup, a.runs, || {
            black_box(sig32.apply(black_box(&qg32)).ok());
        }) / per,
    };

    let timings = Timings {
        input_size: n,
        state_size: m,
        seq_len: a.seq_len,
        warmup: a.warmup,
        runs: a.runs,
        threads: rayon::current_num_threads(),
        float_baseline: baseline,
        cell_step_ns: CellStepNs {
            float32: float_ns,
            int_pwl8: int8,
            int_pwl32: int32,
        },
        speedup_pwl8: float_ns / int8,
        speedup_pwl32: float_ns / int32,
        activation_ns_per_element: act,
        pwl8_not_slower: int8 <= int32,
    };
    info!(
        "cell step: float {float_ns:.0} ns, int pwl8 {int8:.0} ns, int pwl32 {int32:.0} ns ({:.2}x)",
        timings.speedup_pwl8
    );
    let export = m8.export_float()?;
    let report = RunReport {
        layers: Vec::new(),
        timings: Some(timings),
        model_bytes: ModelBytes::new(model_io::save(&m8)?.len(), model_io::save_float(&export)?.len()),
    };
    let mut out: Box<dyn Write> = match &a.report {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    serde_json::to_writer_pretty(&mut out, &report).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}
