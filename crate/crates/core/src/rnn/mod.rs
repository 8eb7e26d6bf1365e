//! LSTM cells: a float reference and the integer-only recipe.
//!
//! Integer cell dataflow for one step, gates stacked `(i, f, j, o)`:
//!
//! ```text
//! a_x = requant8(W_x x + b)          a_h = requant8(W_h h)
//! [MadNorm on a_x and a_h separately]
//! g   = a_x + a_h                    (rescaled sum, preact_bits)
//! c'  = sig(f) c + sig(i) tanh(j)    (products and sum at cell_bits)
//! h'  = sig(o) tanh(c')              (8 bits)
//! ```

mod cell;
pub mod reference;

use serde::{Deserialize, Serialize};

pub use cell::{activation_table, input_params, CellConfig, LstmObservers, LstmState, QLstmCell};
pub use reference::{FloatBiLstm, FloatLstm, LstmNorm, LstmTrace, NormKind};

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::QTensor;

/// `[h_fwd; h_bwd]` without rescaling. Both halves must share parameters.
pub fn bilstm_concat(h_fwd: &QTensor, h_bwd: &QTensor) -> Result<QTensor> {
    QTensor::concat(&[h_fwd, h_bwd])
}

/// Forward and backward integer cells with shared hidden-state parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QBiLstmRecord")]
pub struct QBiLstm {
    fwd: QLstmCell,
    bwd: QLstmCell,
}

#[derive(Deserialize)]
struct QBiLstmRecord {
    fwd: QLstmCell,
    bwd: QLstmCell,
}

impl TryFrom<QBiLstmRecord> for QBiLstm {
    type Error = Error;

    fn try_from(r: QBiLstmRecord) -> Result<Self> {
        Self::new(r.fwd, r.bwd)
    }
}

impl QBiLstm {
    pub fn new(fwd: QLstmCell, bwd: QLstmCell) -> Result<Self> {
        if fwd.h_params() != bwd.h_params() {
            return Err(Error::ConcatParamsMismatch);
        }
        if fwd.in_params() != bwd.in_params() || fwd.input_size() != bwd.input_size() {
            return Err(Error::InvalidArgument(
                "forward and backward cells read different inputs".into(),
            ));
        }
        Ok(Self { fwd, bwd })
    }

    /// Calibrates both directions; their hidden-state observers are merged
    /// so the two halves can be concatenated.
    pub fn calibrate(
        float: &FloatBiLstm,
        cfg: CellConfig,
        fwd_obs: &LstmObservers,
        bwd_obs: &LstmObservers,
        p_x: QuantParams,
    ) -> Result<Self> {
        let mut h = fwd_obs.h;
        h.merge(&bwd_obs.h);
        let p_h = h.finalize(8)?;
        let fwd = QLstmCell::calibrate(&float.fwd, cfg, fwd_obs, p_x, Some(p_h), None)?;
        let bwd = QLstmCell::calibrate(&float.bwd, cfg, bwd_obs, p_x, Some(p_h), None)?;
        Self::new(fwd, bwd)
    }

    pub fn fwd(&self) -> &QLstmCell {
        &self.fwd
    }

    pub fn bwd(&self) -> &QLstmCell {
        &self.bwd
    }

    pub fn h_params(&self) -> &QuantParams {
        self.fwd.h_params()
    }

    /// `[T, 2m]` outputs for a `[T, n]` input.
    pub fn run_sequence(&self, xs: &QTensor) -> Result<QTensor> {
        let rows = xs.rows()?;
        let f = self.fwd.run_sequence(xs)?.rows()?;
        let rev: Vec<QTensor> = rows.into_iter().rev().collect();
        let mut b = self.bwd.run_sequence(&QTensor::stack(&rev)?)?.rows()?;
        b.reverse();
        let out = f
            .iter()
            .zip(&b)
            .map(|(a, b)| bilstm_concat(a, b))
            .collect::<Result<Vec<_>>>()?;
        QTensor::stack(&out)
    }
}

/// Observers for both directions of a float BiLSTM over one sequence.
pub fn observe_bilstm(
    float: &FloatBiLstm,
    xs: &[Vec<f64>],
    fwd_obs: &mut LstmObservers,
    bwd_obs: &mut LstmObservers,
) -> Result<Vec<Vec<f64>>> {
    let f = fwd_obs.observe_sequence(&float.fwd, xs, None)?;
    let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
    let mut b = bwd_obs.observe_sequence(&float.bwd, &rev, None)?;
    b.reverse();
    Ok(f.into_iter()
        .zip(b)
        .map(|(mut a, b)| {
            a.extend(b);
            a
        })
        .collect())
}
