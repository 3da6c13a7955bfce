//! GRU cell built from tape primitives.
//!
//! Gate convention, fixed so the scalar oracle in the tests can replay it:
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h + b_z)
//! r  = sigmoid(W_r x + U_r h + b_r)
//! h~ = tanh(W_h x + U_h (r ⊙ h) + b_h)
//! h' = (1 - z) ⊙ h + z ⊙ h~
//! ```

use super::tape::{NodeId, Tape};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// GRU weights: input matrices are [hidden, input], state matrices
/// [hidden, hidden], biases [hidden].
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_update: Tensor,
    pub w_reset: Tensor,
    pub w_cand: Tensor,
    pub u_update: Tensor,
    pub u_reset: Tensor,
    pub u_cand: Tensor,
    pub b_update: Tensor,
    pub b_reset: Tensor,
    pub b_cand: Tensor,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w_update: Tensor::zeros(&[hidden, input]),
            w_reset: Tensor::zeros(&[hidden, input]),
            w_cand: Tensor::zeros(&[hidden, input]),
            u_update: Tensor::zeros(&[hidden, hidden]),
            u_reset: Tensor::zeros(&[hidden, hidden]),
            u_cand: Tensor::zeros(&[hidden, hidden]),
            b_update: Tensor::zeros(&[hidden]),
            b_reset: Tensor::zeros(&[hidden]),
            b_cand: Tensor::zeros(&[hidden]),
        }
    }

    pub fn init(input: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        let wi = |rng: &mut SplitMix64| Tensor::randn_fan_in(&[hidden, input], input, rng);
        let wh = |rng: &mut SplitMix64| Tensor::randn_fan_in(&[hidden, hidden], hidden, rng);
        GruParams {
            w_update: wi(rng),
            w_reset: wi(rng),
            w_cand: wi(rng),
            u_update: wh(rng),
            u_reset: wh(rng),
            u_cand: wh(rng),
            b_update: Tensor::zeros(&[hidden]),
            b_reset: Tensor::zeros(&[hidden]),
            b_cand: Tensor::zeros(&[hidden]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_update.shape[1]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_update.shape[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden_size(), self.input_size());
        let checks = [
            (&self.w_update.shape, vec![h, i]),
            (&self.w_reset.shape, vec![h, i]),
            (&self.w_cand.shape, vec![h, i]),
            (&self.u_update.shape, vec![h, h]),
            (&self.u_reset.shape, vec![h, h]),
            (&self.u_cand.shape, vec![h, h]),
            (&self.b_update.shape, vec![h]),
            (&self.b_reset.shape, vec![h]),
            (&self.b_cand.shape, vec![h]),
        ];
        for (got, want) in checks {
            if *got != want {
                return Err(Error::shape("gru_params", format!("{got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_update", &self.w_update),
            ("w_reset", &self.w_reset),
            ("w_cand", &self.w_cand),
            ("u_update", &self.u_update),
            ("u_reset", &self.u_reset),
            ("u_cand", &self.u_cand),
            ("b_update", &self.b_update),
            ("b_reset", &self.b_reset),
            ("b_cand", &self.b_cand),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_update", &mut self.w_update),
            ("w_reset", &mut self.w_reset),
            ("w_cand", &mut self.w_cand),
            ("u_update", &mut self.u_update),
            ("u_reset", &mut self.u_reset),
            ("u_cand", &mut self.u_cand),
            ("b_update", &mut self.b_update),
            ("b_reset", &mut self.b_reset),
            ("b_cand", &mut self.b_cand),
        ]
    }
}

/// Tape handles for one registered `GruParams`.
#[derive(Clone, Copy, Debug)]
pub struct GruNodes {
    pub w_update: NodeId,
    pub w_reset: NodeId,
    pub w_cand: NodeId,
    pub u_update: NodeId,
    pub u_reset: NodeId,
    pub u_cand: NodeId,
    pub b_update: NodeId,
    pub b_reset: NodeId,
    pub b_cand: NodeId,
}

impl GruNodes {
    /// Ids in `GruParams::named_tensors` order.
    pub fn ids(&self) -> Vec<NodeId> {
        vec![
            self.w_update,
            self.w_reset,
            self.w_cand,
            self.u_update,
            self.u_reset,
            self.u_cand,
            self.b_update,
            self.b_reset,
            self.b_cand,
        ]
    }

    pub fn register(tape: &mut Tape, p: &GruParams, requires_grad: bool) -> Self {
        GruNodes {
            w_update: tape.leaf(&p.w_update, requires_grad),
            w_reset: tape.leaf(&p.w_reset, requires_grad),
            w_cand: tape.leaf(&p.w_cand, requires_grad),
            u_update: tape.leaf(&p.u_update, requires_grad),
            u_reset: tape.leaf(&p.u_reset, requires_grad),
            u_cand: tape.leaf(&p.u_cand, requires_grad),
            b_update: tape.leaf(&p.b_update, requires_grad),
            b_reset: tape.leaf(&p.b_reset, requires_grad),
            b_cand: tape.leaf(&p.b_cand, requires_grad),
        }
    }
}

/// One GRU step over a batch of rows: x [N, input], h [N, hidden] -> [N, hidden].
pub fn gru_cell_batched(tape: &mut Tape, x: NodeId, h: NodeId, p: &GruNodes) -> Result<NodeId> {
    let xs = tape.shape(x).to_vec();
    let hs = tape.shape(h).to_vec();
    let (hid, inp) = {
        let w = tape.shape(p.w_update);
        (w[0], w[1])
    };
    if xs.len() != 2 || hs.len() != 2 || xs[1] != inp || hs[1] != hid || xs[0] != hs[0] {
        return Err(Error::shape(
            "gru_cell",
            format!("x {xs:?}, h {hs:?} vs input {inp}, hidden {hid}"),
        ));
    }
    let wz = tape.transpose(p.w_update)?;
    let wr = tape.transpose(p.w_reset)?;
    let wh = tape.transpose(p.w_cand)?;
    let uz = tape.transpose(p.u_update)?;
    let ur = tape.transpose(p.u_reset)?;
    let uh = tape.transpose(p.u_cand)?;

    let za = tape.matmul(x, wz)?;
    let zb = tape.matmul(h, uz)?;
    let zs = tape.add(za, zb)?;
    let zs = tape.add(zs, p.b_update)?;
    let z = tape.sigmoid(zs)?;

    let ra = tape.matmul(x, wr)?;
    let rb = tape.matmul(h, ur)?;
    let rs = tape.add(ra, rb)?;
    let rs = tape.add(rs, p.b_reset)?;
    let r = tape.sigmoid(rs)?;

    let rh = tape.mul(r, h)?;
    let ca = tape.matmul(x, wh)?;
    let cb = tape.matmul(rh, uh)?;
    let cs = tape.add(ca, cb)?;
    let cs = tape.add(cs, p.b_cand)?;
    let cand = tape.tanh(cs)?;

    // h' = h + z ⊙ (h~ - h)
    let delta = tape.sub(cand, h)?;
    let zd = tape.mul(z, delta)?;
    tape.add(h, zd)
}

/// Single-vector GRU step: x [input], h [hidden] -> [hidden].
pub fn gru_cell(tape: &mut Tape, x: NodeId, h: NodeId, p: &GruNodes) -> Result<NodeId> {
    let inp = tape.data(x).len();
    let hid = tape.data(h).len();
    let x2 = tape.reshape(x, vec![1, inp])?;
    let h2 = tape.reshape(h, vec![1, hid])?;
    let out = gru_cell_batched(tape, x2, h2, p)?;
    tape.reshape(out, vec![hid])
}
