use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{ModelParams, ParamId, Tensor};
use super::AutodiffError;

/// Weight init bound for every matrix.
pub const INIT_SCALE: f64 = 0.08;

/// Fully connected layer `x·W + b` with `W: in×out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ModelParams,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self, AutodiffError> {
        let weight = params.insert(
            &alloc::format!("{name}.weight"),
            Tensor::uniform(&[d_in, d_out], INIT_SCALE, rng),
        )?;
        let bias = params.insert(&alloc::format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Linear { weight, bias, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, AutodiffError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    /// Same as `forward` with the weights cut off from the gradient.
    pub fn forward_frozen(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, AutodiffError> {
        let w = tape.frozen_param(self.weight);
        let b = tape.frozen_param(self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// Single-layer LSTM weights. Gate blocks along the `4·hidden` axis are
/// ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmWeights {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmWeights {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ModelParams,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, AutodiffError> {
        let w_ih = params.insert(
            &alloc::format!("{name}.w_ih"),
            Tensor::uniform(&[d_in, 4 * hidden], INIT_SCALE, rng),
        )?;
        let w_hh = params.insert(
            &alloc::format!("{name}.w_hh"),
            Tensor::uniform(&[hidden, 4 * hidden], INIT_SCALE, rng),
        )?;
        let bias = params.insert(&alloc::format!("{name}.bias"), Tensor::zeros(&[4 * hidden]))?;
        Ok(LstmWeights { w_ih, w_hh, bias, d_in, hidden })
    }
}

/// One LSTM step on a batch: `x: B×d_in`, `h, c: B×hidden`.
pub fn lstm_cell(
    tape: &mut Tape<'_>,
    x: Var,
    h: Var,
    c: Var,
    w: &LstmWeights,
) -> Result<(Var, Var), AutodiffError> {
    let hd = w.hidden;
    if tape.shape(h).last() != Some(&hd) || tape.shape(c) != tape.shape(h) {
        return Err(AutodiffError::ShapeMismatch {
            op: "lstm_cell",
            left: tape.shape(h).into(),
            right: tape.shape(c).into(),
        });
    }
    let w_ih = tape.param(w.w_ih);
    let w_hh = tape.param(w.w_hh);
    let bias = tape.param(w.bias);
    let xi = tape.matmul(x, w_ih)?;
    let hh = tape.matmul(h, w_hh)?;
    let pre = tape.add(xi, hh)?;
    let gates = tape.add_row(pre, bias)?;
    let i = tape.slice_cols(gates, 0, hd)?;
    let f = tape.slice_cols(gates, hd, hd)?;
    let g = tape.slice_cols(gates, 2 * hd, hd)?;
    let o = tape.slice_cols(gates, 3 * hd, hd)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}
