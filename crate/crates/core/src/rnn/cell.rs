//! Integer-only LSTM cell.

use serde::{Deserialize, Serialize};

use crate::attention::ContextProjection;
use crate::error::{Error, Result};
use crate::linear::QLinear;
use crate::madnorm::{MadNormObserver, QMadNorm};
use crate::pwl::{sigmoid, PwlTable};
use crate::quant::{AddRequantizer, Observer, QuantParams, Requantizer};
use crate::tensor::QTensor;

use super::reference::{FloatLstm, LstmTrace, NormKind};

/// Bitwidth recipe of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellConfig {
    /// Cell state and the two products feeding it: 8 or 16.
    pub cell_bits: u32,
    /// Gate pre-activation sum: 8 or 16.
    pub preact_bits: u32,
    pub use_madnorm: bool,
    /// Piece budget of every activation table.
    pub pwl_pieces: usize,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            cell_bits: 8,
            preact_bits: 8,
            use_madnorm: false,
            pwl_pieces: 32,
        }
    }
}

impl CellConfig {
    pub fn validate(&self) -> Result<()> {
        for b in [self.cell_bits, self.preact_bits] {
            if b != 8 && b != 16 {
                return Err(Error::UnsupportedBitwidth(b));
            }
        }
        if self.pwl_pieces == 0 {
            return Err(Error::InvalidBudget(0));
        }
        Ok(())
    }
}

/// Quantized recurrent state: `h` is always 8-bit, `c` is `cell_bits` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: QTensor,
    pub c: QTensor,
}

/// Min/max statistics of every intermediate of one cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LstmObservers {
    pub x: Observer,
    pub wx_out: Observer,
    pub wh_out: Observer,
    pub norm_x: MadNormObserver,
    pub norm_h: MadNormObserver,
    pub preact: Observer,
    pub ws_out: Observer,
    pub gates: Observer,
    pub fc: Observer,
    pub ij: Observer,
    pub c: Observer,
    pub h: Observer,
}

impl LstmObservers {
    pub fn observe(&mut self, x: &[f64], t: &LstmTrace) {
        self.x.observe(x);
        self.wx_out.observe(&t.wx_out);
        self.wh_out.observe(&t.wh_out);
        if let Some(n) = &t.norm_x {
            self.norm_x.observe(n);
        }
        if let Some(n) = &t.norm_h {
            self.norm_h.observe(n);
        }
        self.preact.observe(&t.preact);
        if let Some(w) = &t.ws_out {
            self.ws_out.observe(w);
        }
        self.gates.observe(&t.gates);
        self.fc.observe(&t.fc);
        self.ij.observe(&t.ij);
        self.c.observe(&t.c);
        self.h.observe(&t.h);
    }

    /// Runs `cell` over a sequence from a zero state and records every step.
    /// `ctxs`, when given, supplies one context vector per step.
    pub fn observe_sequence(
        &mut self,
        cell: &FloatLstm,
        xs: &[Vec<f64>],
        ctxs: Option<&[Vec<f64>]>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut h = vec![0.0; cell.m];
        let mut c = vec![0.0; cell.m];
        let mut out = Vec::with_capacity(xs.len());
        for (t, x) in xs.iter().enumerate() {
            let ctx = ctxs.map(|s| s[t].as_slice());
            let tr = cell.trace(x, &h, &c, ctx)?;
            self.observe(x, &tr);
            h = tr.h.clone();
            c = tr.c.clone();
            out.push(tr.h);
        }
        Ok(out)
    }
}

/// Builds an activation table over the full input grid, then reduces it.
/// Output params cover the function's image on that grid at 8 bits.
pub fn activation_table(
    name: &str,
    f: impl Fn(f64) -> f64 + Copy,
    p_in: QuantParams,
    pieces: usize,
) -> Result<PwlTable> {
    let mut image = Observer::new();
    for q in 0..=p_in.qmax() {
        image.observe_one(f(p_in.dequantize(q)));
    }
    let p_out = image.finalize(8)?;
    let full = PwlTable::build_full(name, f, p_in, p_out)?;
    if pieces >= full.pieces() {
        Ok(full)
    } else {
        full.reduce(pieces)
    }
}

fn tanh(x: f64) -> f64 {
    x.tanh()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QLstmCell {
    n: usize,
    m: usize,
    cfg: CellConfig,
    wx: QLinear,
    wh: QLinear,
    norm_x: Option<QMadNorm>,
    norm_h: Option<QMadNorm>,
    p_preact: QuantParams,
    gate_add: AddRequantizer,
    context: Option<ContextProjection>,
    sigmoid: PwlTable,
    tanh_j: PwlTable,
    tanh_c: PwlTable,
    p_fc: QuantParams,
    p_ij: QuantParams,
    p_c: QuantParams,
    p_h: QuantParams,
    fc_rq: Requantizer,
    ij_rq: Requantizer,
    c_add: AddRequantizer,
    h_rq: Requantizer,
}

impl QLstmCell {
    /// Freezes a float cell into integer form.
    ///
    /// `p_x` are the input params (previous layer's output). `p_h`
    /// overrides the calibrated hidden-state params, which lets two cells
    /// share them. `p_ctx` are the attention context params of a decoder.
    pub fn calibrate(
        float: &FloatLstm,
        cfg: CellConfig,
        obs: &LstmObservers,
        p_x: QuantParams,
        p_h: Option<QuantParams>,
        p_ctx: Option<QuantParams>,
    ) -> Result<Self> {
        cfg.validate()?;
        float.validate()?;
        match (&float.norm, cfg.use_madnorm) {
            (None, false) => {}
            (Some(n), true) if n.kind == NormKind::MadNorm => {}
            (Some(_), true) => {
                return Err(Error::InvalidArgument(
                    "LayerNorm has no integer form; convert the cell to MadNorm first".into(),
                ))
            }
            (Some(_), false) | (None, true) => {
                return Err(Error::InvalidArgument(
                    "cell normalization does not match the configuration".into(),
                ))
            }
        }
        let (n, m) = (float.n, float.m);
        let g = 4 * m;
        let p_h = match p_h {
            Some(p) => p,
            None => obs.h.finalize(8)?,
        };
        if p_h.bitwidth != 8 {
            return Err(Error::UnsupportedBitwidth(p_h.bitwidth));
        }
        let p_wx = obs.wx_out.finalize(8)?;
        let p_wh = obs.wh_out.finalize(8)?;

        let (wx, wh, norm_x, norm_h, p_ax, p_ah) = match &float.norm {
            None => {
                let wx = QLinear::from_float(&float.wx, g, n, float.bias.as_deref(), p_x, p_wx)?;
                let wh = QLinear::from_float(&float.wh, g, m, None, p_h, p_wh)?;
                (wx, wh, None, None, p_wx, p_wh)
            }
            Some(nm) => {
                let wx = QLinear::from_float(&float.wx, g, n, None, p_x, p_wx)?;
                let wh = QLinear::from_float(&float.wh, g, m, None, p_h, p_wh)?;
                let nx = QMadNorm::new(
                    g,
                    p_wx,
                    obs.norm_x.finalize()?,
                    Some(nm.gamma_x.clone()),
                    float.bias.clone(),
                )?;
                let nh = QMadNorm::new(g, p_wh, obs.norm_h.finalize()?, Some(nm.gamma_h.clone()), None)?;
                let (px, ph) = (*nx.out_params(), *nh.out_params());
                (wx, wh, Some(nx), Some(nh), px, ph)
            }
        };
        let p_preact = obs.preact.finalize(cfg.preact_bits)?;
        let gate_add = AddRequantizer::new(&p_ax, &p_ah, &p_preact)?;

        let context = match (&float.ws, p_ctx) {
            (Some(ws), Some(p_s)) => {
                let p_ws = obs.ws_out.finalize(8)?;
                let lin = QLinear::from_float(ws, g, float.ctx_dim, None, p_s, p_ws)?;
                let p_gates = obs.gates.finalize(cfg.preact_bits)?;
                Some(ContextProjection::new(lin, p_preact, p_gates)?)
            }
            (None, None) => None,
            _ => {
                return Err(Error::Uncalibrated(
                    "context weights and context params must come together".into(),
                ))
            }
        };
        let p_gates = context.as_ref().map_or(p_preact, |c| *c.out_params());

        let sig = activation_table("sigmoid", sigmoid, p_gates, cfg.pwl_pieces)?;
        let tanh_j = activation_table("tanh", tanh, p_gates, cfg.pwl_pieces)?;
        let p_fc = obs.fc.finalize(cfg.cell_bits)?;
        let p_ij = obs.ij.finalize(cfg.cell_bits)?;
        let p_c = obs.c.finalize(cfg.cell_bits)?;
        let tanh_c = activation_table("tanh", tanh, p_c, cfg.pwl_pieces)?;

        let ps = *sig.out_params();
        let pt = *tanh_j.out_params();
        let ptc = *tanh_c.out_params();
        let fc_rq = Requantizer::new(ps.scale * p_c.scale / p_fc.scale, &p_fc)?;
        let ij_rq = Requantizer::new(ps.scale * pt.scale / p_ij.scale, &p_ij)?;
        let c_add = AddRequantizer::new(&p_fc, &p_ij, &p_c)?;
        let h_rq = Requantizer::new(ps.scale * ptc.scale / p_h.scale, &p_h)?;
        Ok(Self {
            n,
            m,
            cfg,
            wx,
            wh,
            norm_x,
            norm_h,
            p_preact,
            gate_add,
            context,
            sigmoid: sig,
            tanh_j,
            tanh_c,
            p_fc,
            p_ij,
            p_c,
            p_h,
            fc_rq,
            ij_rq,
            c_add,
            h_rq,
        })
    }

    pub fn input_size(&self) -> usize {
        self.n
    }

    pub fn hidden_size(&self) -> usize {
        self.m
    }

    pub fn config(&self) -> &CellConfig {
        &self.cfg
    }

    pub fn in_params(&self) -> &QuantParams {
        self.wx.in_params()
    }

    pub fn h_params(&self) -> &QuantParams {
        &self.p_h
    }

    pub fn c_params(&self) -> &QuantParams {
        &self.p_c
    }

    pub fn preact_params(&self) -> &QuantParams {
        &self.p_preact
    }

    pub fn context(&self) -> Option<&ContextProjection> {
        self.context.as_ref()
    }

    pub fn tables(&self) -> [&PwlTable; 3] {
        [&self.sigmoid, &self.tanh_j, &self.tanh_c]
    }

    pub fn wx(&self) -> &QLinear {
        &self.wx
    }

    pub fn wh(&self) -> &QLinear {
        &self.wh
    }

    pub fn norms(&self) -> Option<(&QMadNorm, &QMadNorm)> {
        self.norm_x.as_ref().zip(self.norm_h.as_ref())
    }

    /// `h_0 = Z_h`, `c_0 = Z_c`.
    pub fn zero_state(&self) -> LstmState {
        LstmState {
            h: QTensor::zeros(vec![self.m], self.p_h),
            c: QTensor::zeros(vec![self.m], self.p_c),
        }
    }

    /// Integer gate pre-activations `W_x x + W_h h (+ W_s s)`, stacked `(i, f, j, o)`.
    pub fn gates(&self, x: &QTensor, h: &QTensor, ctx: Option<&QTensor>) -> Result<QTensor> {
        let mut ax = self.wx.forward(x)?;
        let mut ah = self.wh.forward(h)?;
        if let Some((nx, nh)) = self.norms() {
            ax = nx.apply(&ax)?;
            ah = nh.apply(&ah)?;
        }
        let data = ax
            .data()
            .iter()
            .zip(ah.data())
            .map(|(&a, &b)| self.gate_add.apply(a as i64, b as i64) as u32)
            .collect();
        let pre = QTensor::new(data, vec![4 * self.m], self.p_preact)?;
        match (&self.context, ctx) {
            (Some(proj), Some(s)) => proj.attach(&pre, s),
            (None, None) => Ok(pre),
            (Some(_), None) => Err(Error::InvalidArgument("decoder cell needs a context vector".into())),
            (None, Some(_)) => Err(Error::InvalidArgument("cell has no context weights".into())),
        }
    }

    pub fn step(&self, x: &QTensor, state: &LstmState, ctx: Option<&QTensor>) -> Result<LstmState> {
        if state.c.params() != &self.p_c || state.h.params() != &self.p_h {
            return Err(Error::InvalidArgument("state parameters differ from calibration".into()));
        }
        let g = self.gates(x, &state.h, ctx)?;
        let m = self.m;
        let zs = self.sigmoid.out_params().zero_point;
        let zt = self.tanh_j.out_params().zero_point;
        let ztc = self.tanh_c.out_params().zero_point;
        let zc = self.p_c.zero_point;
        let mut c_new = Vec::with_capacity(m);
        let mut h_new = Vec::with_capacity(m);
        for u in 0..m {
            let si = self.sigmoid.eval_int(g.get(u)) - zs;
            let sf = self.sigmoid.eval_int(g.get(m + u)) - zs;
            let tj = self.tanh_j.eval_int(g.get(2 * m + u)) - zt;
            let so = self.sigmoid.eval_int(g.get(3 * m + u)) - zs;
            let fc = self.fc_rq.apply(sf * (state.c.get(u) - zc));
            let ij = self.ij_rq.apply(si * tj);
            let c = self.c_add.apply(fc, ij);
            let tc = self.tanh_c.eval_int(c) - ztc;
            let h = self.h_rq.apply(so * tc);
            c_new.push(c as u32);
            h_new.push(h as u32);
        }
        Ok(LstmState {
            h: QTensor::new(h_new, vec![m], self.p_h)?,
            c: QTensor::new(c_new, vec![m], self.p_c)?,
        })
    }

    /// Hidden states `[T, m]` of a `[T, n]` input from the zero state.
    pub fn run_sequence(&self, xs: &QTensor) -> Result<QTensor> {
        let rows = xs.rows()?;
        if rows.is_empty() {
            return Err(Error::Empty("sequence"));
        }
        let mut state = self.zero_state();
        let mut out = Vec::with_capacity(rows.len());
        for x in &rows {
            state = self.step(x, &state, None)?;
            out.push(state.h.clone());
        }
        QTensor::stack(&out)
    }
}

/// Input params for a first layer, from the observed inputs.
pub fn input_params(obs: &LstmObservers) -> Result<QuantParams> {
    obs.x.finalize(8)
}
