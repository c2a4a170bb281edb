use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{axpy, Matrix};

/// Affine map `y = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Per-task gating router: one affine layer from the gate input to expert logits.
pub type Router = Linear;

/// Per-task square projection applied to tokens before the expert layer.
pub type TaskProjection = Linear;

impl Linear {
    pub fn zeros(d_out: usize, d_in: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_out, d_in),
            bias: vec![0.0; d_out],
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Matrix::identity(d),
            bias: vec![0.0; d],
        }
    }

    /// Gaussian weights, zero bias.
    pub fn random(d_out: usize, d_in: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self {
            weight: Matrix::from_fn(d_out, d_in, |_, _| normal.sample(rng)),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        axpy(&mut y, 1.0, &self.bias);
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut Linear) -> Vec<f64> {
        grads.weight.add_outer(1.0, dy, x);
        axpy(&mut grads.bias, 1.0, dy);
        self.weight.matvec_t(dy)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.weight"), self.weight.data());
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), self.weight.data_mut());
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}
