use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::QLinear;
use crate::quant::{AddRequantizer, QuantParams};
use crate::tensor::QTensor;

/// The `W_s s_t` term of a decoder cell, added to its gate pre-activations
/// with one rescaled integer sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextProjection {
    ws: QLinear,
    p_gates: QuantParams,
    p_out: QuantParams,
    add: AddRequantizer,
}

impl ContextProjection {
    /// `ws` maps the context to `[rows]` 8-bit outputs; `p_gates` are the
    /// incoming pre-activation params and `p_out` those of the sum.
    pub fn new(ws: QLinear, p_gates: QuantParams, p_out: QuantParams) -> Result<Self> {
        let add = AddRequantizer::new(&p_gates, ws.out_params(), &p_out)?;
        Ok(Self {
            ws,
            p_gates,
            p_out,
            add,
        })
    }

    pub fn weights(&self) -> &QLinear {
        &self.ws
    }

    pub fn in_params(&self) -> &QuantParams {
        &self.p_gates
    }

    pub fn out_params(&self) -> &QuantParams {
        &self.p_out
    }

    pub fn context_params(&self) -> &QuantParams {
        self.ws.in_params()
    }

    pub fn attach(&self, gates: &QTensor, s: &QTensor) -> Result<QTensor> {
        if gates.len() != self.ws.rows() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.ws.rows()],
                actual: gates.shape().to_vec(),
            });
        }
        if gates.params() != &self.p_gates {
            return Err(Error::InvalidArgument(
                "gate parameters differ from calibration".into(),
            ));
        }
        let proj = self.ws.forward(s)?;
        let data = gates
            .data()
            .iter()
            .zip(proj.data())
            .map(|(&g, &p)| self.add.apply(g as i64, p as i64) as u32)
            .collect();
        QTensor::new(data, vec![gates.len()], self.p_out)
    }
}

/// `gates + W_s s_t` in the integer domain.
pub fn attach_context(gates: &QTensor, proj: &ContextProjection, s: &QTensor) -> Result<QTensor> {
    proj.attach(gates, s)
}
