//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! `Tensor` is a plain value (row-major data + shape). Differentiable
//! computation happens on a [`Tape`]: register tensors as leaves, call op
//! methods, then [`Tape::backward`] from a scalar root.

pub mod gradcheck;
pub mod gru;
pub mod kernels;
mod tape;

pub use gradcheck::{grad_check, numeric_gradients};
pub use gru::{gru_cell, gru_cell_batched, GruNodes, GruParams};
pub use tape::{NodeId, Primitive, Tape};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must equal the product of the shape"
        );
        Tensor { data, shape }
    }

    pub fn try_new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(
                "tensor",
                format!("data length {} vs shape {shape:?}", data.len()),
            ));
        }
        Ok(Tensor { data, shape })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { data: vec![0.0; shape.iter().product()], shape: shape.to_vec() }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { data: vec![v], shape: vec![1] }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { data: (0..n).map(|_| rng.next_normal() * std).collect(), shape: shape.to_vec() }
    }

    /// He-style init for a layer with the given fan-in.
    pub fn randn_fan_in(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Self {
        Self::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}
