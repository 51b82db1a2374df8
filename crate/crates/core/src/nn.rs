//! Fully connected layers and the gated recurrent update shared by both routers.
//!
//! Weights are stored input-major: a layer mapping `d_in → d_out` owns a
//! `d_in × d_out` matrix `w` and a length-`d_out` bias `b`, and acts on a batch
//! of row vectors as `x · w + b`. This is the transpose of the usual column
//! convention `W x`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

pub fn insert_linear(
    params: &mut ParameterSet,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    params.insert_uniform(&format!("{prefix}.w"), d_in, d_out, d_in, rng)?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn load(tape: &mut Tape, params: &ParameterSet, prefix: &str) -> Result<Self> {
        Ok(LinearVars {
            w: tape.param(params, &format!("{prefix}.w"))?,
            b: tape.param(params, &format!("{prefix}.b"))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_row(y, self.b)
    }

    pub fn dims(&self, tape: &Tape) -> (usize, usize) {
        let s = tape.shape(self.w);
        (s[0], s[1])
    }
}

/// Registers `W^z, U^z, W^r, U^r, W, U` and zero per-gate biases under `prefix`.
pub fn insert_gru(
    params: &mut ParameterSet,
    prefix: &str,
    d_in: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for gate in ["z", "r", "h"] {
        params.insert_uniform(&format!("{prefix}.w{gate}"), d_in, d, d_in, rng)?;
        params.insert_uniform(&format!("{prefix}.u{gate}"), d, d, d, rng)?;
        params.insert(format!("{prefix}.b{gate}"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

impl GruVars {
    pub fn load(tape: &mut Tape, params: &ParameterSet, prefix: &str) -> Result<Self> {
        let mut p = |s: &str| tape.param(params, &format!("{prefix}.{s}"));
        Ok(GruVars {
            wz: p("wz")?,
            uz: p("uz")?,
            bz: p("bz")?,
            wr: p("wr")?,
            ur: p("ur")?,
            br: p("br")?,
            wh: p("wh")?,
            uh: p("uh")?,
            bh: p("bh")?,
        })
    }

    /// (input width, hidden width).
    pub fn dims(&self, tape: &Tape) -> (usize, usize) {
        let s = tape.shape(self.wz);
        (s[0], s[1])
    }
}

/// Intermediate activations of one gated update, all `rows × d`.
#[derive(Clone, Copy, Debug)]
pub struct GruStep {
    pub update: Var,
    pub reset: Var,
    pub candidate: Var,
    pub hidden: Var,
}

/// One gated update applied row-wise to a batch of nodes:
///
/// ```text
/// z  = σ(a Wz + h Uz + bz)
/// r  = σ(a Wr + h Ur + br)
/// h~ = tanh(a W + (r ⊙ h) U + b)
/// h' = (1 − z) ⊙ h + z ⊙ h~
/// ```
pub fn gru_step(tape: &mut Tape, a: Var, h: Var, gru: &GruVars) -> Result<GruStep> {
    let (d_in, d) = gru.dims(tape);
    let (rows_a, cols_a) = tape.value(a).dims2()?;
    let (rows_h, cols_h) = tape.value(h).dims2()?;
    if cols_a != d_in || cols_h != d || rows_a != rows_h {
        return Err(Error::dim("gru_cell", &[rows_a, cols_a], &[rows_h, cols_h]));
    }
    let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, hh: Var| -> Result<Var> {
        let x = tape.matmul(a, w)?;
        let y = tape.matmul(hh, u)?;
        let s = tape.add(x, y)?;
        tape.add_row(s, b)
    };
    let z_pre = gate(tape, gru.wz, gru.uz, gru.bz, h)?;
    let update = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, gru.wr, gru.ur, gru.br, h)?;
    let reset = tape.sigmoid(r_pre)?;
    let gated = tape.mul(reset, h)?;
    let c_pre = gate(tape, gru.wh, gru.uh, gru.bh, gated)?;
    let candidate = tape.tanh(c_pre)?;
    // h + z ⊙ (h~ − h)
    let delta = tape.sub(candidate, h)?;
    let step = tape.mul(update, delta)?;
    let hidden = tape.add(h, step)?;
    Ok(GruStep {
        update,
        reset,
        candidate,
        hidden,
    })
}

pub fn gru_cell(tape: &mut Tape, a: Var, h: Var, gru: &GruVars) -> Result<Var> {
    Ok(gru_step(tape, a, h, gru)?.hidden)
}

/// Value-level gated update of a single node.
pub fn gru_cell_value(a: &[f64], h_prev: &[f64], params: &ParameterSet, prefix: &str) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let gru = GruVars::load(&mut tape, params, prefix)?;
    let av = tape.constant(Tensor::matrix(1, a.len(), a.to_vec())?);
    let hv = tape.constant(Tensor::matrix(1, h_prev.len(), h_prev.to_vec())?);
    let out = gru_cell(&mut tape, av, hv, &gru)?;
    Ok(tape.value(out).data().to_vec())
}
