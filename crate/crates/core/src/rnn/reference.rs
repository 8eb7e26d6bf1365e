//! Floating-point LSTM used for calibration and as the accuracy oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::matvec;
use crate::madnorm::{layernorm_ref, madnorm_trace, MadNormTrace};
use crate::pwl::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    MadNorm,
}

/// Normalization applied separately to `W_x x` and `W_h h`. The cell bias
/// acts as the shift of the input-path normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmNorm {
    pub kind: NormKind,
    pub gamma_x: Vec<f64>,
    pub gamma_h: Vec<f64>,
}

/// Row-major float LSTM weights. Gate blocks are stacked `(i, f, j, o)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatLstm {
    pub n: usize,
    pub m: usize,
    /// `[4m, n]`
    pub wx: Vec<f64>,
    /// `[4m, m]`
    pub wh: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub norm: Option<LstmNorm>,
    /// Width of an attention context added to the gates, if any.
    #[serde(default)]
    pub ctx_dim: usize,
    /// `[4m, ctx_dim]`
    #[serde(default)]
    pub ws: Option<Vec<f64>>,
}

/// Every real-valued intermediate of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmTrace {
    pub wx_out: Vec<f64>,
    pub wh_out: Vec<f64>,
    pub norm_x: Option<MadNormTrace>,
    pub norm_h: Option<MadNormTrace>,
    /// `W_x x + W_h h (+ b)` after normalization.
    pub preact: Vec<f64>,
    pub ws_out: Option<Vec<f64>>,
    /// Pre-activations after the context term, equal to `preact` without one.
    pub gates: Vec<f64>,
    pub fc: Vec<f64>,
    pub ij: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl FloatLstm {
    pub fn new(n: usize, m: usize, wx: Vec<f64>, wh: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        let cell = Self {
            n,
            m,
            wx,
            wh,
            bias,
            norm: None,
            ctx_dim: 0,
            ws: None,
        };
        cell.validate()?;
        Ok(cell)
    }

    pub fn with_norm(mut self, norm: LstmNorm) -> Result<Self> {
        self.norm = Some(norm);
        self.validate()?;
        Ok(self)
    }

    pub fn with_context(mut self, ctx_dim: usize, ws: Vec<f64>) -> Result<Self> {
        self.ctx_dim = ctx_dim;
        self.ws = Some(ws);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let g = 4 * self.m;
        let check = |what: usize, want: usize| {
            if what == want {
                Ok(())
            } else {
                Err(Error::ShapeMismatch {
                    expected: vec![want],
                    actual: vec![what],
                })
            }
        };
        if self.n == 0 || self.m == 0 {
            return Err(Error::Empty("LSTM dimensions"));
        }
        check(self.wx.len(), g * self.n)?;
        check(self.wh.len(), g * self.m)?;
        if let Some(b) = &self.bias {
            check(b.len(), g)?;
        }
        if let Some(nm) = &self.norm {
            check(nm.gamma_x.len(), g)?;
            check(nm.gamma_h.len(), g)?;
        }
        match (&self.ws, self.ctx_dim) {
            (Some(ws), d) if d > 0 => check(ws.len(), g * d)?,
            (None, 0) => {}
            _ => return Err(Error::InvalidArgument("context weights and width disagree".into())),
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.wx.len()
            + self.wh.len()
            + self.bias.as_ref().map_or(0, Vec::len)
            + self.norm.as_ref().map_or(0, |n| n.gamma_x.len() + n.gamma_h.len())
            + self.ws.as_ref().map_or(0, Vec::len)
    }

    /// One step, returning `(h', c')`.
    pub fn step(&self, x: &[f64], h: &[f64], c: &[f64], ctx: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self.trace(x, h, c, ctx)?;
        Ok((t.h, t.c))
    }

    pub fn trace(&self, x: &[f64], h: &[f64], c: &[f64], ctx: Option<&[f64]>) -> Result<LstmTrace> {
        let (n, m) = (self.n, self.m);
        for (got, want) in [(x.len(), n), (h.len(), m), (c.len(), m)] {
            if got != want {
                return Err(Error::ShapeMismatch {
                    expected: vec![want],
                    actual: vec![got],
                });
            }
        }
        let g = 4 * m;
        let bias = self.bias.as_deref();
        let (wx_out, wh_out, norm_x, norm_h, preact) = match &self.norm {
            None => {
                let wx_out = matvec(&self.wx, g, n, x, bias);
                let wh_out = matvec(&self.wh, g, m, h, None);
                let pre: Vec<f64> = wx_out.iter().zip(&wh_out).map(|(a, b)| a + b).collect();
                (wx_out, wh_out, None, None, pre)
            }
            Some(nm) => {
                let wx_out = matvec(&self.wx, g, n, x, None);
                let wh_out = matvec(&self.wh, g, m, h, None);
                let (nx, nh) = match nm.kind {
                    NormKind::MadNorm => (
                        madnorm_trace(&wx_out, Some(&nm.gamma_x), bias)?,
                        madnorm_trace(&wh_out, Some(&nm.gamma_h), None)?,
                    ),
                    NormKind::LayerNorm => {
                        let ln = |v: &[f64], gamma: &[f64], beta: Option<&[f64]>| -> Result<MadNormTrace> {
                            let y = layernorm_ref(v)?;
                            Ok(MadNormTrace {
                                mu: 0.0,
                                xhat: Vec::new(),
                                d: 0.0,
                                y: crate::madnorm::affine(&y, Some(gamma), beta),
                            })
                        };
                        (ln(&wx_out, &nm.gamma_x, bias)?, ln(&wh_out, &nm.gamma_h, None)?)
                    }
                };
                let pre = nx.y.iter().zip(&nh.y).map(|(a, b)| a + b).collect();
                (wx_out, wh_out, Some(nx), Some(nh), pre)
            }
        };
        let (ws_out, gates) = match (&self.ws, ctx) {
            (Some(ws), Some(s)) => {
                if s.len() != self.ctx_dim {
                    return Err(Error::ShapeMismatch {
                        expected: vec![self.ctx_dim],
                        actual: vec![s.len()],
                    });
                }
                let out = matvec(ws, g, self.ctx_dim, s, None);
                let gates = preact.iter().zip(&out).map(|(a, b)| a + b).collect();
                (Some(out), gates)
            }
            (None, None) => (None, preact.clone()),
            _ => return Err(Error::InvalidArgument("context supplied to a cell without context weights, or missing".into())),
        };

        let mut fc = vec![0.0; m];
        let mut ij = vec![0.0; m];
        let mut c_new = vec![0.0; m];
        let mut h_new = vec![0.0; m];
        for u in 0..m {
            let (i, f, j, o) = (gates[u], gates[m + u], gates[2 * m + u], gates[3 * m + u]);
            fc[u] = sigmoid(f) * c[u];
            ij[u] = sigmoid(i) * j.tanh();
            c_new[u] = fc[u] + ij[u];
            h_new[u] = sigmoid(o) * c_new[u].tanh();
        }
        Ok(LstmTrace {
            wx_out,
            wh_out,
            norm_x,
            norm_h,
            preact,
            ws_out,
            gates,
            fc,
            ij,
            c: c_new,
            h: h_new,
        })
    }

    /// Hidden states for a whole sequence from a zero initial state.
    pub fn run(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut h = vec![0.0; self.m];
        let mut c = vec![0.0; self.m];
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let (h2, c2) = self.step(x, &h, &c, None)?;
            out.push(h2.clone());
            h = h2;
            c = c2;
        }
        Ok(out)
    }
}

/// Forward and backward cells whose outputs are concatenated per timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatBiLstm {
    pub fwd: FloatLstm,
    pub bwd: FloatLstm,
}

impl FloatBiLstm {
    pub fn run(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let f = self.fwd.run(xs)?;
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut b = self.bwd.run(&rev)?;
        b.reverse();
        Ok(f.into_iter()
            .zip(b)
            .map(|(mut a, b)| {
                a.extend(b);
                a
            })
            .collect())
    }
}
