use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat, Vector};

use super::params::{ParamId, ParamSet};
use super::tape::{NodeId, Tape};

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Xavier/Glorot uniform matrix.
pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

/// Matrix with orthonormal rows or columns (whichever is fewer), from the QR
/// factorization of a Gaussian matrix.
pub fn orthogonal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = Mat::from_fn(tall, short, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // fix column signs so the draw is Haar-distributed
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

impl LinearParams {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), xavier_uniform(out_dim, in_dim, rng));
        let bias = params.add(format!("{name}.bias"), Mat::zeros(out_dim, 1));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let n = tape.value(x).len();
        if n != self.in_dim {
            return Err(Error::DimensionMismatch(format!(
                "linear layer expects {} inputs, got {n}",
                self.in_dim
            )));
        }
        Ok(tape.affine(self.weight, self.bias, x))
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + U_n (r ⊙ h) + b_n)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruParams {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |gate: &str| {
            params.add(
                format!("{name}.w_{gate}"),
                orthogonal(hidden_dim, input_dim, rng),
            )
        };
        let (w_z, w_r, w_n) = (w("z"), w("r"), w("n"));
        let mut u = |gate: &str| {
            params.add(
                format!("{name}.u_{gate}"),
                orthogonal(hidden_dim, hidden_dim, rng),
            )
        };
        let (u_z, u_r, u_n) = (u("z"), u("r"), u("n"));
        let mut b = |gate: &str| params.add(format!("{name}.b_{gate}"), Mat::zeros(hidden_dim, 1));
        let (b_z, b_r, b_n) = (b("z"), b("r"), b("n"));
        Self {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_n,
            u_n,
            b_n,
            input_dim,
            hidden_dim,
        }
    }
}

pub fn gru_forward(p: &GruParams, tape: &mut Tape, h: NodeId, x: NodeId) -> Result<NodeId> {
    let (hn, xn) = (tape.value(h).len(), tape.value(x).len());
    if hn != p.hidden_dim || xn != p.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "GRU expects hidden {} / input {}, got {hn} / {xn}",
            p.hidden_dim, p.input_dim
        )));
    }
    let gate = |tape: &mut Tape, w, u, b| {
        let wx = tape.affine(w, b, x);
        let uh = tape.matvec(u, h);
        let pre = tape.add(wx, uh);
        tape.sigmoid(pre)
    };
    let z = gate(tape, p.w_z, p.u_z, p.b_z);
    let r = gate(tape, p.w_r, p.u_r, p.b_r);
    let rh = tape.mul(r, h);
    let wx = tape.affine(p.w_n, p.b_n, x);
    let urh = tape.matvec(p.u_n, rh);
    let pre = tape.add(wx, urh);
    let n = tape.tanh(pre);
    // n + z ⊙ (h − n)
    let d = tape.sub(h, n);
    let zd = tape.mul(z, d);
    Ok(tape.add(n, zd))
}

/// Convenience for callers that want a fresh constant hidden state.
pub fn zero_hidden(tape: &mut Tape, dim: usize) -> NodeId {
    tape.input(Vector::zeros(dim))
}
