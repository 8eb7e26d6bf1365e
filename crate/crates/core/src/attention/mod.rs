//! Additive (Bahdanau) attention with an integer-only path.
//!
//! ```text
//! e_i   = v . tanh(W_q h_dec + W_k h_enc_i)
//! a_i   = exp(e_i - max_j e_j) / sum_j exp(e_j - max_j e_j)
//! s     = sum_i a_i h_enc_i
//! ```
//!
//! Integer bitwidths: 8-bit projections, 16-bit projection sum and
//! alignments, 8-bit `tanh` and `exp` outputs, a 32-bit softmax denominator
//! and an 8-bit context vector. The context is formed as one rounded
//! division of `sum_i q_exp_i (q_h_i - Z_h)` by the denominator.

mod context;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use context::{attach_context, ContextProjection};

use crate::error::{Error, Result};
use crate::fixedpoint::{self, FixedPointScalar};
use crate::linear::{matvec, QLinear};
use crate::pwl::PwlTable;
use crate::quant::{derive_params, AddRequantizer, Observer, QuantParams, Requantizer};
use crate::rnn::activation_table;
use crate::tensor::QTensor;

/// Lower end of the shifted alignment domain fed to `exp`.
pub const EXP_DOMAIN: f64 = 10.0;

const EXP_INPUT_BITS: u32 = 16;
const MAX_DIV_FRACTION_BITS: u32 = 62;
const PAR_MIN_STEPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatAttention {
    pub m_att: usize,
    pub m_dec: usize,
    pub m_enc: usize,
    /// `[m_att, m_dec]`
    pub wq: Vec<f64>,
    /// `[m_att, m_enc]`
    pub wk: Vec<f64>,
    /// `[m_att]`
    pub v: Vec<f64>,
}

/// Real-valued intermediates of one attention query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub q_proj: Vec<f64>,
    pub k_proj: Vec<Vec<f64>>,
    pub sum: Vec<Vec<f64>>,
    pub e: Vec<f64>,
    pub exp: Vec<f64>,
    pub denom: f64,
    pub alpha: Vec<f64>,
    pub s: Vec<f64>,
}

impl FloatAttention {
    pub fn validate(&self) -> Result<()> {
        let want = [
            (self.wq.len(), self.m_att * self.m_dec),
            (self.wk.len(), self.m_att * self.m_enc),
            (self.v.len(), self.m_att),
        ];
        for (got, want) in want {
            if got != want {
                return Err(Error::ShapeMismatch {
                    expected: vec![want],
                    actual: vec![got],
                });
            }
        }
        if self.m_att == 0 || self.m_dec == 0 || self.m_enc == 0 {
            return Err(Error::Empty("attention dimensions"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.wq.len() + self.wk.len() + self.v.len()
    }

    pub fn trace(&self, h_dec: &[f64], h_enc: &[Vec<f64>]) -> Result<AttentionTrace> {
        if h_enc.is_empty() {
            return Err(Error::Empty("encoder states"));
        }
        if h_dec.len() != self.m_dec || h_enc.iter().any(|h| h.len() != self.m_enc) {
            return Err(Error::ShapeMismatch {
                expected: vec![self.m_dec, self.m_enc],
                actual: vec![h_dec.len(), h_enc[0].len()],
            });
        }
        let q_proj = matvec(&self.wq, self.m_att, self.m_dec, h_dec, None);
        let k_proj: Vec<Vec<f64>> = h_enc
            .iter()
            .map(|h| matvec(&self.wk, self.m_att, self.m_enc, h, None))
            .collect();
        let sum: Vec<Vec<f64>> = k_proj
            .iter()
            .map(|k| k.iter().zip(&q_proj).map(|(a, b)| a + b).collect())
            .collect();
        let e: Vec<f64> = sum
            .iter()
            .map(|s| s.iter().zip(&self.v).map(|(x, v)| v * x.tanh()).sum())
            .collect();
        let top = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = e.iter().map(|x| (x - top).exp()).collect();
        let denom: f64 = exp.iter().sum();
        let alpha: Vec<f64> = exp.iter().map(|x| x / denom).collect();
        let mut s = vec![0.0; self.m_enc];
        for (a, h) in alpha.iter().zip(h_enc) {
            for (sk, hk) in s.iter_mut().zip(h) {
                *sk += a * hk;
            }
        }
        Ok(AttentionTrace {
            q_proj,
            k_proj,
            sum,
            e,
            exp,
            denom,
            alpha,
            s,
        })
    }

    /// `(s, alpha)`.
    pub fn attend(&self, h_dec: &[f64], h_enc: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self.trace(h_dec, h_enc)?;
        Ok((t.s, t.alpha))
    }
}

pub fn attention_ref(
    h_dec: &[f64],
    h_enc: &[Vec<f64>],
    weights: &FloatAttention,
) -> Result<(Vec<f64>, Vec<f64>)> {
    weights.attend(h_dec, h_enc)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionObservers {
    pub h_dec: Observer,
    pub h_enc: Observer,
    pub q_proj: Observer,
    pub k_proj: Observer,
    pub sum: Observer,
    pub e: Observer,
    pub denom: Observer,
    pub s: Observer,
}

impl AttentionObservers {
    pub fn observe(&mut self, h_dec: &[f64], h_enc: &[Vec<f64>], t: &AttentionTrace) {
        self.h_dec.observe(h_dec);
        for h in h_enc {
            self.h_enc.observe(h);
        }
        self.q_proj.observe(&t.q_proj);
        for k in &t.k_proj {
            self.k_proj.observe(k);
        }
        for s in &t.sum {
            self.sum.observe(s);
        }
        self.e.observe(&t.e);
        self.denom.observe_one(t.denom);
        self.s.observe(&t.s);
    }
}

/// How the softmax denominator is held before the context division.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenominatorMode {
    /// Unreduced 32-bit sum of the `exp` codes.
    Int32,
    /// Requantized to 8 bits first. Diagnostic only.
    Quantized8,
}

/// Piece budgets of the two attention tables. Both read 16-bit inputs, so
/// they need more pieces than the 8-bit LSTM gate tables; `exp` gets the most
/// because of its curvature near the top of the shifted domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionPieces {
    pub tanh: usize,
    pub exp: usize,
}

impl Default for AttentionPieces {
    fn default() -> Self {
        Self { tanh: 96, exp: 160 }
    }
}

/// Integer outputs of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub s: QTensor,
    pub q_e: Vec<i64>,
    pub q_exp: Vec<i64>,
    /// The divisor actually used: the int32 sum, or the centered 8-bit code.
    pub denom: i64,
    /// Attention weights implied by the integer codes.
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAttention {
    wq: QLinear,
    wk: QLinear,
    v: QLinear,
    p_sum: QuantParams,
    sum_add: AddRequantizer,
    tanh: PwlTable,
    p_e: QuantParams,
    shift: Requantizer,
    exp: PwlTable,
    p_den: QuantParams,
    den_rq: Requantizer,
    p_s: QuantParams,
    mode: DenominatorMode,
    ctx_scale: FixedPointScalar,
}

impl QAttention {
    /// Freezes float weights with the observed statistics. `p_dec` and
    /// `p_enc` are the decoder and encoder hidden-state params.
    pub fn calibrate(
        float: &FloatAttention,
        obs: &AttentionObservers,
        p_dec: QuantParams,
        p_enc: QuantParams,
        pieces: AttentionPieces,
        mode: DenominatorMode,
    ) -> Result<Self> {
        float.validate()?;
        let p_qp = obs.q_proj.finalize(8)?;
        let p_kp = obs.k_proj.finalize(8)?;
        let p_sum = obs.sum.finalize(16)?;
        let wq = QLinear::from_float(&float.wq, float.m_att, float.m_dec, None, p_dec, p_qp)?;
        let wk = QLinear::from_float(&float.wk, float.m_att, float.m_enc, None, p_enc, p_kp)?;
        let sum_add = AddRequantizer::new(&p_qp, &p_kp, &p_sum)?;
        let tanh = activation_table("tanh", f64::tanh, p_sum, pieces.tanh)?;
        // tanh is bounded, so |e| <= sum |v| holds for any input
        let e_bound = float.v.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        let p_e = derive_params(-e_bound, e_bound, 16)?;
        let v = QLinear::from_float(&float.v, 1, float.m_att, None, *tanh.out_params(), p_e)?;

        let p_shift = derive_params(-EXP_DOMAIN, 0.0, EXP_INPUT_BITS)?;
        let shift = Requantizer::new(p_e.scale / p_shift.scale, &p_shift)?;
        let exp = activation_table("exp", f64::exp, p_shift, pieces.exp)?;
        let p_den = obs.denom.finalize(8)?;
        let den_rq = Requantizer::new(exp.out_params().scale / p_den.scale, &p_den)?;
        let p_s = obs.s.finalize(8)?;
        let mut att = Self {
            wq,
            wk,
            v,
            p_sum,
            sum_add,
            tanh,
            p_e,
            shift,
            exp,
            p_den,
            den_rq,
            p_s,
            mode,
            ctx_scale: FixedPointScalar::from_raw(0, 0),
        };
        att.set_mode(mode)?;
        Ok(att)
    }

    /// Switches the denominator handling; only the context constant changes.
    pub fn set_mode(&mut self, mode: DenominatorMode) -> Result<()> {
        let s_h = self.wk.in_params().scale;
        let m = match mode {
            DenominatorMode::Int32 => s_h / self.p_s.scale,
            DenominatorMode::Quantized8 => {
                s_h * self.exp.out_params().scale / (self.p_s.scale * self.p_den.scale)
            }
        };
        let fb = (fixedpoint::REQUANT_FRACTION_BITS as i32 - m.log2().ceil() as i32)
            .clamp(0, MAX_DIV_FRACTION_BITS as i32) as u32;
        self.ctx_scale = fixedpoint::to_fixed(m, fb)?;
        self.mode = mode;
        Ok(())
    }

    pub fn mode(&self) -> DenominatorMode {
        self.mode
    }

    pub fn with_mode(mut self, mode: DenominatorMode) -> Result<Self> {
        self.set_mode(mode)?;
        Ok(self)
    }

    pub fn dec_params(&self) -> &QuantParams {
        self.wq.in_params()
    }

    pub fn enc_params(&self) -> &QuantParams {
        self.wk.in_params()
    }

    pub fn context_params(&self) -> &QuantParams {
        &self.p_s
    }

    pub fn alignment_params(&self) -> &QuantParams {
        &self.p_e
    }

    pub fn query_weights(&self) -> &QLinear {
        &self.wq
    }

    pub fn key_weights(&self) -> &QLinear {
        &self.wk
    }

    pub fn score_weights(&self) -> &QLinear {
        &self.v
    }

    /// Float attention with the dequantized weights.
    pub fn export_float(&self) -> FloatAttention {
        FloatAttention {
            m_att: self.wk.rows(),
            m_dec: self.wq.cols(),
            m_enc: self.wk.cols(),
            wq: self.wq.dequantized().0,
            wk: self.wk.dequantized().0,
            v: self.v.dequantized().0,
        }
    }

    pub fn exp_table(&self) -> &PwlTable {
        &self.exp
    }

    pub fn tanh_table(&self) -> &PwlTable {
        &self.tanh
    }

    /// 8-bit key projections `W_k h_enc_i`, reusable across decoder steps.
    pub fn project_keys(&self, h_enc: &QTensor) -> Result<Vec<QTensor>> {
        let rows = h_enc.rows()?;
        if rows.is_empty() {
            return Err(Error::Empty("encoder states"));
        }
        if rows.len() >= PAR_MIN_STEPS {
            rows.par_iter().map(|h| self.wk.forward(h)).collect()
        } else {
            rows.iter().map(|h| self.wk.forward(h)).collect()
        }
    }

    /// 16-bit alignment for one projected key.
    fn alignment(&self, q: &QTensor, k: &QTensor) -> Result<i64> {
        let data = q
            .data()
            .iter()
            .zip(k.data())
            .map(|(&a, &b)| {
                let s = self.sum_add.apply(a as i64, b as i64);
                self.tanh.eval_int(s) as u32
            })
            .collect();
        let t = QTensor::new(data, vec![q.len()], *self.tanh.out_params())?;
        Ok(self.v.forward(&t)?.get(0))
    }

    /// Alignments of a query against projected keys.
    pub fn alignments(&self, h_dec: &QTensor, keys: &[QTensor]) -> Result<Vec<i64>> {
        let q = self.wq.forward(h_dec)?;
        if keys.len() >= PAR_MIN_STEPS {
            keys.par_iter().map(|k| self.alignment(&q, k)).collect()
        } else {
            keys.iter().map(|k| self.alignment(&q, k)).collect()
        }
    }

    /// Integer softmax numerators after the max shift, and their sum.
    pub fn softmax_weights(&self, q_e: &[i64]) -> Result<(Vec<i64>, i64)> {
        let top = *q_e.iter().max().ok_or(Error::Empty("alignments"))?;
        let z = self.exp.out_params().zero_point;
        let q_exp: Vec<i64> = q_e
            .iter()
            .map(|&q| self.exp.eval_int(self.shift.apply(q - top)) - z)
            .collect();
        let denom: i64 = q_exp.iter().map(|&v| v as i32).sum::<i32>() as i64;
        assert!(denom > 0, "exp of the largest alignment quantized to zero");
        Ok((q_exp, denom))
    }

    pub fn attend(&self, h_dec: &QTensor, h_enc: &QTensor) -> Result<AttentionOutput> {
        let keys = self.project_keys(h_enc)?;
        self.attend_keys(h_dec, h_enc, &keys)
    }

    pub fn attend_keys(&self, h_dec: &QTensor, h_enc: &QTensor, keys: &[QTensor]) -> Result<AttentionOutput> {
        let q_e = self.alignments(h_dec, keys)?;
        let (q_exp, sum) = self.softmax_weights(&q_e)?;
        let s_exp = self.exp.out_params().scale;
        let (den, alpha) = match self.mode {
            DenominatorMode::Int32 => (
                sum,
                q_exp.iter().map(|&v| v as f64 / sum as f64).collect::<Vec<_>>(),
            ),
            DenominatorMode::Quantized8 => {
                let d = (self.den_rq.apply(sum) - self.p_den.zero_point).max(1);
                let real = self.p_den.scale * d as f64;
                (d, q_exp.iter().map(|&v| s_exp * v as f64 / real).collect())
            }
        };
        let m_enc = self.wk.cols();
        let zh = self.enc_params().zero_point;
        let mut num = vec![0i64; m_enc];
        for (i, &w) in q_exp.iter().enumerate() {
            for (k, acc) in num.iter_mut().enumerate() {
                *acc += w * (h_enc.row(i)[k] as i64 - zh);
            }
        }
        let f = self.ctx_scale.fraction_bits;
        let data = num
            .iter()
            .map(|&n| {
                let r = fixedpoint::round_div(self.ctx_scale.raw as i128 * n as i128, (den as i128) << f);
                self.p_s.saturate(r as i64 + self.p_s.zero_point) as u32
            })
            .collect();
        Ok(AttentionOutput {
            s: QTensor::new(data, vec![m_enc], self.p_s)?,
            q_e,
            q_exp,
            denom: den,
            alpha,
        })
    }
}

/// `(s, exp codes)` for the integer path with the given tables.
pub fn attention_int(att: &QAttention, h_dec: &QTensor, h_enc: &QTensor) -> Result<(QTensor, Vec<i64>)> {
    let out = att.attend(h_dec, h_enc)?;
    Ok((out.s, out.q_exp))
}
