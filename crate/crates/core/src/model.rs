//! Whole models: stacked (Bi)LSTM encoders with an optional attention
//! decoder, their calibration into integer form, and toy generators.
//!
//! The encoder-decoder graph is a small test harness: the decoder reads the
//! same input sequence as the encoder and attends over the encoder outputs
//! at every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionObservers, AttentionPieces, DenominatorMode, FloatAttention, QAttention};
use crate::error::{Error, Result};
use crate::madnorm::QMadNorm;
use crate::quant::{Observer, QuantParams};
use crate::rnn::{
    observe_bilstm, CellConfig, FloatBiLstm, FloatLstm, LstmNorm, LstmObservers, NormKind, QBiLstm,
    QLstmCell,
};
use crate::tensor::QTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FloatLayer {
    Lstm(FloatLstm),
    BiLstm(FloatBiLstm),
}

impl FloatLayer {
    pub fn input_size(&self) -> usize {
        match self {
            FloatLayer::Lstm(c) => c.n,
            FloatLayer::BiLstm(b) => b.fwd.n,
        }
    }

    pub fn output_size(&self) -> usize {
        match self {
            FloatLayer::Lstm(c) => c.m,
            FloatLayer::BiLstm(b) => b.fwd.m + b.bwd.m,
        }
    }

    pub fn run(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match self {
            FloatLayer::Lstm(c) => c.run(xs),
            FloatLayer::BiLstm(b) => b.run(xs),
        }
    }

    fn cells_mut(&mut self) -> Vec<&mut FloatLstm> {
        match self {
            FloatLayer::Lstm(c) => vec![c],
            FloatLayer::BiLstm(b) => vec![&mut b.fwd, &mut b.bwd],
        }
    }

    fn param_count(&self) -> usize {
        match self {
            FloatLayer::Lstm(c) => c.param_count(),
            FloatLayer::BiLstm(b) => b.fwd.param_count() + b.bwd.param_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatDecoder {
    pub cell: FloatLstm,
    pub attention: FloatAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatModel {
    pub input_size: usize,
    pub layers: Vec<FloatLayer>,
    #[serde(default)]
    pub decoder: Option<FloatDecoder>,
}

impl FloatModel {
    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_size;
        if self.layers.is_empty() {
            return Err(Error::Empty("model layers"));
        }
        for layer in &self.layers {
            match layer {
                FloatLayer::Lstm(c) => c.validate()?,
                FloatLayer::BiLstm(b) => {
                    b.fwd.validate()?;
                    b.bwd.validate()?;
                    if b.fwd.m != b.bwd.m || b.fwd.n != b.bwd.n {
                        return Err(Error::InvalidArgument("BiLSTM directions differ in size".into()));
                    }
                }
            }
            if layer.input_size() != width {
                return Err(Error::ShapeMismatch {
                    expected: vec![width],
                    actual: vec![layer.input_size()],
                });
            }
            width = layer.output_size();
        }
        if let Some(d) = &self.decoder {
            d.cell.validate()?;
            d.attention.validate()?;
            let a = &d.attention;
            if d.cell.n != self.input_size
                || d.cell.ctx_dim != width
                || a.m_enc != width
                || a.m_dec != d.cell.m
            {
                return Err(Error::InvalidArgument("decoder dimensions do not match the encoder".into()));
            }
        }
        Ok(())
    }

    pub fn output_size(&self) -> usize {
        match &self.decoder {
            Some(d) => d.cell.m,
            None => self.layers.last().map_or(0, FloatLayer::output_size),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(FloatLayer::param_count).sum::<usize>()
            + self
                .decoder
                .as_ref()
                .map_or(0, |d| d.cell.param_count() + d.attention.param_count())
    }

    /// Replaces every LayerNorm with MadNorm, keeping gains and shifts.
    pub fn with_madnorm(mut self) -> Result<Self> {
        let mut any = false;
        let mut cells: Vec<&mut FloatLstm> = self.layers.iter_mut().flat_map(FloatLayer::cells_mut).collect();
        if let Some(d) = self.decoder.as_mut() {
            cells.push(&mut d.cell);
        }
        for c in cells {
            if let Some(n) = c.norm.as_mut() {
                n.kind = NormKind::MadNorm;
                any = true;
            }
        }
        if !any {
            return Err(Error::InvalidArgument("model has no normalization to replace".into()));
        }
        Ok(self)
    }

    pub fn uses_norm(&self) -> bool {
        let enc = self.layers.iter().any(|l| match l {
            FloatLayer::Lstm(c) => c.norm.is_some(),
            FloatLayer::BiLstm(b) => b.fwd.norm.is_some(),
        });
        enc || self.decoder.as_ref().is_some_and(|d| d.cell.norm.is_some())
    }

    /// Encoder outputs for one sequence.
    pub fn encode(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut h = xs.to_vec();
        for layer in &self.layers {
            h = layer.run(&h)?;
        }
        Ok(h)
    }

    /// Final outputs: encoder states, or decoder states when a decoder exists.
    pub fn run(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let enc = self.encode(xs)?;
        match &self.decoder {
            None => Ok(enc),
            Some(d) => {
                let mut h = vec![0.0; d.cell.m];
                let mut c = vec![0.0; d.cell.m];
                let mut out = Vec::with_capacity(xs.len());
                for x in xs {
                    let (s, _) = d.attention.attend(&h, &enc)?;
                    let (h2, c2) = d.cell.step(x, &h, &c, Some(&s))?;
                    h = h2;
                    c = c2;
                    out.push(h.clone());
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
// layers live in a Vec built once, so variant size does not matter
#[allow(clippy::large_enum_variant)]
pub enum QLayer {
    Lstm(QLstmCell),
    BiLstm(QBiLstm),
}

impl QLayer {
    pub fn out_params(&self) -> &QuantParams {
        match self {
            QLayer::Lstm(c) => c.h_params(),
            QLayer::BiLstm(b) => b.h_params(),
        }
    }

    pub fn run_sequence(&self, xs: &QTensor) -> Result<QTensor> {
        match self {
            QLayer::Lstm(c) => c.run_sequence(xs),
            QLayer::BiLstm(b) => b.run_sequence(xs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QDecoder {
    pub cell: QLstmCell,
    pub attention: QAttention,
}

/// A calibrated integer-only model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrnnModel {
    pub config: CellConfig,
    pub input_size: usize,
    pub input_params: QuantParams,
    pub layers: Vec<QLayer>,
    #[serde(default)]
    pub decoder: Option<QDecoder>,
}

/// Per-layer outputs of a float and an integer run on the same input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutputs {
    pub name: String,
    pub float: Vec<f64>,
    pub int: Vec<f64>,
}

impl IrnnModel {
    /// Runs `float` over the calibration sequences with observers on every
    /// intermediate, then freezes all quantization parameters.
    pub fn calibrate(float: &FloatModel, cfg: CellConfig, calib: &[Vec<Vec<f64>>]) -> Result<Self> {
        float.validate()?;
        cfg.validate()?;
        if calib.is_empty() || calib.iter().any(Vec::is_empty) {
            return Err(Error::Uncalibrated("no calibration sequences".into()));
        }
        let mut input_obs = Observer::new();
        for s in calib {
            for x in s {
                if x.len() != float.input_size {
                    return Err(Error::ShapeMismatch {
                        expected: vec![float.input_size],
                        actual: vec![x.len()],
                    });
                }
                input_obs.observe(x);
            }
        }
        let input_params = input_obs.finalize(8)?;

        let mut p_in = input_params;
        let mut layers = Vec::with_capacity(float.layers.len());
        let mut seqs: Vec<Vec<Vec<f64>>> = calib.to_vec();
        for layer in &float.layers {
            match layer {
                FloatLayer::Lstm(cell) => {
                    let mut obs = LstmObservers::default();
                    let next = seqs
                        .iter()
                        .map(|s| obs.observe_sequence(cell, s, None))
                        .collect::<Result<Vec<_>>>()?;
                    let q = QLstmCell::calibrate(cell, cfg, &obs, p_in, None, None)?;
                    p_in = *q.h_params();
                    layers.push(QLayer::Lstm(q));
                    seqs = next;
                }
                FloatLayer::BiLstm(bi) => {
                    let (mut fo, mut bo) = (LstmObservers::default(), LstmObservers::default());
                    let next = seqs
                        .iter()
                        .map(|s| observe_bilstm(bi, s, &mut fo, &mut bo))
                        .collect::<Result<Vec<_>>>()?;
                    let q = QBiLstm::calibrate(bi, cfg, &fo, &bo, p_in)?;
                    p_in = *q.h_params();
                    layers.push(QLayer::BiLstm(q));
                    seqs = next;
                }
            }
        }

        let decoder = match &float.decoder {
            None => None,
            Some(d) => {
                let mut cell_obs = LstmObservers::default();
                let mut att_obs = AttentionObservers::default();
                for (xs, enc) in calib.iter().zip(&seqs) {
                    let mut h = vec![0.0; d.cell.m];
                    let mut c = vec![0.0; d.cell.m];
                    for x in xs {
                        let at = d.attention.trace(&h, enc)?;
                        att_obs.observe(&h, enc, &at);
                        let tr = d.cell.trace(x, &h, &c, Some(&at.s))?;
                        cell_obs.observe(x, &tr);
                        h = tr.h.clone();
                        c = tr.c.clone();
                    }
                }
                let p_dec = cell_obs.h.finalize(8)?;
                let attention = QAttention::calibrate(
                    &d.attention,
                    &att_obs,
                    p_dec,
                    p_in,
                    AttentionPieces::default(),
                    DenominatorMode::Int32,
                )?;
                let cell = QLstmCell::calibrate(
                    &d.cell,
                    cfg,
                    &cell_obs,
                    input_params,
                    Some(p_dec),
                    Some(*attention.context_params()),
                )?;
                Some(QDecoder { cell, attention })
            }
        };
        Ok(Self {
            config: cfg,
            input_size: float.input_size,
            input_params,
            layers,
            decoder,
        })
    }

    pub fn output_params(&self) -> &QuantParams {
        match &self.decoder {
            Some(d) => d.cell.h_params(),
            None => self.layers.last().expect("validated non-empty").out_params(),
        }
    }

    pub fn quantize_input(&self, xs: &[Vec<f64>]) -> Result<QTensor> {
        if xs.iter().any(|x| x.len() != self.input_size) {
            return Err(Error::ShapeMismatch {
                expected: vec![self.input_size],
                actual: vec![xs.first().map_or(0, Vec::len)],
            });
        }
        QTensor::quantize(&xs.concat(), vec![xs.len(), self.input_size], self.input_params)
    }

    pub fn encode(&self, xs: &QTensor) -> Result<QTensor> {
        let mut h = xs.clone();
        for layer in &self.layers {
            h = layer.run_sequence(&h)?;
        }
        Ok(h)
    }

    /// `[T, out]` integer outputs for a `[T, n]` quantized input.
    pub fn run(&self, xs: &QTensor) -> Result<QTensor> {
        if xs.params() != &self.input_params {
            return Err(Error::InvalidArgument("input is not quantized with the model's params".into()));
        }
        let enc = self.encode(xs)?;
        match &self.decoder {
            None => Ok(enc),
            Some(d) => {
                let keys = d.attention.project_keys(&enc)?;
                let mut state = d.cell.zero_state();
                let mut out = Vec::new();
                for x in xs.rows()? {
                    let att = d.attention.attend_keys(&state.h, &enc, &keys)?;
                    state = d.cell.step(&x, &state, Some(&att.s))?;
                    out.push(state.h.clone());
                }
                QTensor::stack(&out)
            }
        }
    }

    /// Dequantizes every weight back into a float model with the same topology.
    pub fn export_float(&self) -> Result<FloatModel> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    QLayer::Lstm(c) => FloatLayer::Lstm(export_cell(c)?),
                    QLayer::BiLstm(b) => FloatLayer::BiLstm(FloatBiLstm {
                        fwd: export_cell(b.fwd())?,
                        bwd: export_cell(b.bwd())?,
                    }),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = match &self.decoder {
            None => None,
            Some(d) => {
                let att = d.attention.export_float();
                Some(FloatDecoder {
                    cell: export_cell(&d.cell)?,
                    attention: att,
                })
            }
        };
        Ok(FloatModel {
            input_size: self.input_size,
            layers,
            decoder,
        })
    }

    /// Runs both paths on one sequence and returns per-layer outputs, with
    /// each integer layer fed the integer output of the one before.
    pub fn compare(&self, float: &FloatModel, xs: &[Vec<f64>]) -> Result<Vec<LayerOutputs>> {
        let mut out = Vec::new();
        let mut fx = xs.to_vec();
        let mut qx = self.quantize_input(xs)?;
        for (i, (fl, ql)) in float.layers.iter().zip(&self.layers).enumerate() {
            fx = fl.run(&fx)?;
            qx = ql.run_sequence(&qx)?;
            out.push(LayerOutputs {
                name: format!("layer{i}"),
                float: fx.concat(),
                int: qx.dequantize(),
            });
        }
        if self.decoder.is_some() {
            out.push(LayerOutputs {
                name: "decoder".into(),
                float: float.run(xs)?.concat(),
                int: self.run(&self.quantize_input(xs)?)?.dequantize(),
            });
        }
        Ok(out)
    }
}

fn export_cell(c: &QLstmCell) -> Result<FloatLstm> {
    let (wx, bias_x) = c.wx().dequantized();
    let (wh, _) = c.wh().dequantized();
    let (n, m) = (c.input_size(), c.hidden_size());
    let mut cell = match c.norms() {
        None => FloatLstm::new(n, m, wx, wh, bias_x)?,
        Some((nx, nh)) => {
            let gamma = |q: &QMadNorm| q.gamma().map_or_else(|| vec![1.0; 4 * m], <[f64]>::to_vec);
            FloatLstm::new(n, m, wx, wh, nx.beta().map(<[f64]>::to_vec))?.with_norm(LstmNorm {
                kind: NormKind::MadNorm,
                gamma_x: gamma(nx),
                gamma_h: gamma(nh),
            })?
        }
    };
    if let Some(ctx) = c.context() {
        let (ws, _) = ctx.weights().dequantized();
        cell = cell.with_context(ctx.weights().cols(), ws)?;
    }
    Ok(cell)
}

/// Shape of a generated toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub input_size: usize,
    pub hidden_size: usize,
    pub layers: usize,
    pub bidirectional: bool,
    pub layernorm: bool,
    /// Attention width of a decoder; 0 for an encoder-only model.
    pub attention: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            input_size: 16,
            hidden_size: 16,
            layers: 1,
            bidirectional: false,
            layernorm: false,
            attention: 0,
        }
    }
}

fn uniform(rng: &mut impl Rng, len: usize, r: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-r..r)).collect()
}

/// Cell with weights and bias drawn from `U(-1/sqrt(m), 1/sqrt(m))`.
pub fn toy_cell(rng: &mut impl Rng, n: usize, m: usize, layernorm: bool) -> Result<FloatLstm> {
    let r = 1.0 / (m as f64).sqrt();
    let wx = uniform(rng, 4 * m * n, r);
    let wh = uniform(rng, 4 * m * m, r);
    let b = uniform(rng, 4 * m, r);
    let cell = FloatLstm::new(n, m, wx, wh, Some(b))?;
    if layernorm {
        cell.with_norm(LstmNorm {
            kind: NormKind::LayerNorm,
            gamma_x: vec![1.0; 4 * m],
            gamma_h: vec![1.0; 4 * m],
        })
    } else {
        Ok(cell)
    }
}

pub fn toy_attention(rng: &mut impl Rng, m_att: usize, m_dec: usize, m_enc: usize) -> FloatAttention {
    FloatAttention {
        m_att,
        m_dec,
        m_enc,
        wq: uniform(rng, m_att * m_dec, 1.0 / (m_dec as f64).sqrt()),
        wk: uniform(rng, m_att * m_enc, 1.0 / (m_enc as f64).sqrt()),
        v: uniform(rng, m_att, 2.0),
    }
}

pub fn toy_model(spec: ToySpec, seed: u64) -> Result<FloatModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (spec.input_size, spec.hidden_size);
    let mut width = n;
    let mut layers = Vec::with_capacity(spec.layers);
    for _ in 0..spec.layers {
        if spec.bidirectional {
            let fwd = toy_cell(&mut rng, width, m, spec.layernorm)?;
            let bwd = toy_cell(&mut rng, width, m, spec.layernorm)?;
            layers.push(FloatLayer::BiLstm(FloatBiLstm { fwd, bwd }));
            width = 2 * m;
        } else {
            layers.push(FloatLayer::Lstm(toy_cell(&mut rng, width, m, spec.layernorm)?));
            width = m;
        }
    }
    let decoder = if spec.attention > 0 {
        let cell = toy_cell(&mut rng, n, m, spec.layernorm)?;
        let ws = uniform(&mut rng, 4 * m * width, 1.0 / (width as f64).sqrt());
        let cell = cell.with_context(width, ws)?;
        let attention = toy_attention(&mut rng, spec.attention, m, width);
        Some(FloatDecoder { cell, attention })
    } else {
        None
    };
    let model = FloatModel {
        input_size: n,
        layers,
        decoder,
    };
    model.validate()?;
    Ok(model)
}

/// `count` sequences of `len` steps with entries drawn from `U(-1, 1)`.
pub fn toy_sequences(rng: &mut impl Rng, count: usize, len: usize, width: usize) -> Vec<Vec<Vec<f64>>> {
    (0..count)
        .map(|_| (0..len).map(|_| uniform(rng, width, 1.0)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calib(seed: u64, n: usize) -> Vec<Vec<Vec<f64>>> {
        toy_sequences(&mut ChaCha8Rng::seed_from_u64(seed), 6, 16, n)
    }

    #[test]
    fn stacked_model_tracks_float() {
        let spec = ToySpec {
            input_size: 6,
            hidden_size: 8,
            layers: 2,
            ..ToySpec::default()
        };
        let float = toy_model(spec, 1).unwrap();
        let model = IrnnModel::calibrate(&float, CellConfig::default(), &calib(2, 6)).unwrap();
        let xs = &calib(3, 6)[0];
        let layers = model.compare(&float, xs).unwrap();
        assert_eq!(layers.len(), 2);
        for l in &layers {
            let e = l.float.iter().zip(&l.int).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(e < 0.15, "{}: {e}", l.name);
        }
    }

    #[test]
    fn bidirectional_layernorm_needs_conversion() {
        let spec = ToySpec {
            input_size: 4,
            hidden_size: 4,
            layers: 2,
            bidirectional: true,
            layernorm: true,
            attention: 0,
        };
        let float = toy_model(spec, 5).unwrap();
        let cfg = CellConfig {
            use_madnorm: true,
            ..CellConfig::default()
        };
        assert!(IrnnModel::calibrate(&float, cfg, &calib(6, 4)).is_err());
        let mad = float.with_madnorm().unwrap();
        let model = IrnnModel::calibrate(&mad, cfg, &calib(6, 4)).unwrap();
        let out = model.run(&model.quantize_input(&calib(7, 4)[0]).unwrap()).unwrap();
        assert_eq!(out.shape(), &[16, 8]);
        let back = model.export_float().unwrap();
        assert_eq!(back.layers.len(), 2);
        assert!(back.uses_norm());
    }

    #[test]
    fn encoder_decoder_runs_and_exports() {
        let spec = ToySpec {
            input_size: 4,
            hidden_size: 8,
            attention: 8,
            ..ToySpec::default()
        };
        let float = toy_model(spec, 9).unwrap();
        let model = IrnnModel::calibrate(&float, CellConfig::default(), &calib(10, 4)).unwrap();
        let xs = &calib(11, 4)[0];
        let out = model.run(&model.quantize_input(xs).unwrap()).unwrap();
        assert_eq!(out.shape(), &[16, 8]);
        let r = float.run(xs).unwrap().concat();
        let e = out.dequantize().iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(e < 0.2, "{e}");
        let exported = model.export_float().unwrap();
        exported.validate().unwrap();
        assert_eq!(exported.param_count(), float.param_count());
    }

    #[test]
    fn export_within_half_step() {
        let float = toy_model(ToySpec::default(), 3).unwrap();
        let model = IrnnModel::calibrate(&float, CellConfig::default(), &calib(4, 16)).unwrap();
        let back = model.export_float().unwrap();
        let (FloatLayer::Lstm(a), FloatLayer::Lstm(b), QLayer::Lstm(q)) = (&float.layers[0], &back.layers[0], &model.layers[0]) else {
            panic!("unexpected layer kinds");
        };
        let s = q.wx().weight().params().scale;
        assert!(a.wx.iter().zip(&b.wx).all(|(x, y)| (x - y).abs() <= s / 2.0 + 1e-12));
    }

    #[test]
    fn empty_calibration_rejected() {
        let float = toy_model(ToySpec::default(), 3).unwrap();
        assert!(matches!(
            IrnnModel::calibrate(&float, CellConfig::default(), &[]),
            Err(Error::Uncalibrated(_))
        ));
    }
}
