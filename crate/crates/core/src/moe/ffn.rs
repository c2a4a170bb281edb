//! Two-layer GELU feed-forward blocks and their low-rank residual form.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{axpy, gelu, gelu_grad, Matrix};

/// `out = w2 · gelu(w1 · x + b1) + b2`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertFfn {
    /// `d_hidden × d_model`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `d_model × d_hidden`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ExpertFfn {
    pub fn zeros(d_model: usize, d_hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(d_hidden, d_model),
            b1: vec![0.0; d_hidden],
            w2: Matrix::zeros(d_model, d_hidden),
            b2: vec![0.0; d_model],
        }
    }

    /// Gaussian weights with the given standard deviation, zero biases.
    pub fn random(d_model: usize, d_hidden: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self {
            w1: Matrix::from_fn(d_hidden, d_model, |_, _| normal.sample(rng)),
            b1: vec![0.0; d_hidden],
            w2: Matrix::from_fn(d_model, d_hidden, |_, _| normal.sample(rng)),
            b2: vec![0.0; d_model],
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn check_shape(&self, d_model: usize, d_hidden: usize) -> Result<()> {
        let ok = self.w1.shape() == (d_hidden, d_model)
            && self.b1.len() == d_hidden
            && self.w2.shape() == (d_model, d_hidden)
            && self.b2.len() == d_model;
        if ok {
            Ok(())
        } else {
            Err(crate::error::config(format!(
                "expert shape {:?}/{:?} does not match d_model = {d_model}, d_hidden = {d_hidden}",
                self.w1.shape(),
                self.w2.shape()
            )))
        }
    }

    pub fn same_shape(&self, other: &ExpertFfn) -> bool {
        self.w1.shape() == other.w1.shape()
            && self.w2.shape() == other.w2.shape()
            && self.b1.len() == other.b1.len()
            && self.b2.len() == other.b2.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        ffn_forward(self, None, x).out
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.w1"), self.w1.data());
        f(&format!("{prefix}.b1"), &self.b1);
        f(&format!("{prefix}.w2"), self.w2.data());
        f(&format!("{prefix}.b2"), &self.b2);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.w1"), self.w1.data_mut());
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), self.w2.data_mut());
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}

/// Rank-`r` factors with `b · a ≈ ΔW`; `a` is `r × d_in`, `b` is `d_out × r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraFactors {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraFactors {
    pub fn empty(d_out: usize, d_in: usize) -> Self {
        Self {
            a: Matrix::zeros(0, d_in),
            b: Matrix::zeros(d_out, 0),
        }
    }

    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(invalid(format!(
                "lora factors disagree on rank: a is {:?}, b is {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("factor shapes agree by construction")
    }
}

/// Task-specific expert: low-rank residuals on both sub-layers of the global
/// expert plus exact bias residuals.
///
/// Its contribution to the layer output is the merged FFN
/// `(W_gl + b·a, b_gl + Δb)` minus the global expert itself, so that global
/// plus task expert reproduces the merged network exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraExpert {
    pub layer1: LoraFactors,
    pub layer2: LoraFactors,
    pub bias1: Vec<f64>,
    pub bias2: Vec<f64>,
}

impl LoraExpert {
    pub fn empty(d_model: usize, d_hidden: usize) -> Self {
        Self {
            layer1: LoraFactors::empty(d_hidden, d_model),
            layer2: LoraFactors::empty(d_model, d_hidden),
            bias1: vec![0.0; d_hidden],
            bias2: vec![0.0; d_model],
        }
    }

    pub fn ranks(&self) -> (usize, usize) {
        (self.layer1.rank(), self.layer2.rank())
    }

    /// True when the expert contributes exactly zero.
    pub fn is_inert(&self) -> bool {
        self.layer1.rank() == 0
            && self.layer2.rank() == 0
            && self.bias1.iter().all(|&v| v == 0.0)
            && self.bias2.iter().all(|&v| v == 0.0)
    }

    pub fn check_shape(&self, d_model: usize, d_hidden: usize) -> Result<()> {
        let l1 = &self.layer1;
        let l2 = &self.layer2;
        let ok = l1.a.cols() == d_model
            && l1.b.rows() == d_hidden
            && l1.a.rows() == l1.b.cols()
            && l2.a.cols() == d_hidden
            && l2.b.rows() == d_model
            && l2.a.rows() == l2.b.cols()
            && self.bias1.len() == d_hidden
            && self.bias2.len() == d_model;
        if ok {
            Ok(())
        } else {
            Err(crate::error::config("task expert shapes do not match the global expert"))
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.a1"), self.layer1.a.data());
        f(&format!("{prefix}.b1"), self.layer1.b.data());
        f(&format!("{prefix}.a2"), self.layer2.a.data());
        f(&format!("{prefix}.b2"), self.layer2.b.data());
        f(&format!("{prefix}.bias1"), &self.bias1);
        f(&format!("{prefix}.bias2"), &self.bias2);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.a1"), self.layer1.a.data_mut());
        f(&format!("{prefix}.b1"), self.layer1.b.data_mut());
        f(&format!("{prefix}.a2"), self.layer2.a.data_mut());
        f(&format!("{prefix}.b2"), self.layer2.b.data_mut());
        f(&format!("{prefix}.bias1"), &mut self.bias1);
        f(&format!("{prefix}.bias2"), &mut self.bias2);
    }
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct FfnTrace {
    pub x: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    /// `a1 · x`, empty without a residual
    pub low1: Vec<f64>,
    /// `a2 · act`, empty without a residual
    pub low2: Vec<f64>,
    pub out: Vec<f64>,
}

/// Forward through `base`, optionally merged with a low-rank residual.
pub fn ffn_forward(base: &ExpertFfn, lora: Option<&LoraExpert>, x: &[f64]) -> FfnTrace {
    let mut pre = base.w1.matvec(x);
    axpy(&mut pre, 1.0, &base.b1);
    let mut low1 = Vec::new();
    if let Some(l) = lora {
        low1 = l.layer1.a.matvec(x);
        axpy(&mut pre, 1.0, &l.layer1.b.matvec(&low1));
        axpy(&mut pre, 1.0, &l.bias1);
    }
    let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    let mut out = base.w2.matvec(&act);
    axpy(&mut out, 1.0, &base.b2);
    let mut low2 = Vec::new();
    if let Some(l) = lora {
        low2 = l.layer2.a.matvec(&act);
        axpy(&mut out, 1.0, &l.layer2.b.matvec(&low2));
        axpy(&mut out, 1.0, &l.bias2);
    }
    FfnTrace {
        x: x.to_vec(),
        pre,
        act,
        low1,
        low2,
        out,
    }
}

/// Backpropagates `d_out` through a trace produced by [`ffn_forward`].
///
/// Gradients are accumulated into `g_base` / `g_lora`; `dx` receives `dL/dx`.
pub fn ffn_backward(
    base: &ExpertFfn,
    lora: Option<&LoraExpert>,
    trace: &FfnTrace,
    d_out: &[f64],
    g_base: &mut ExpertFfn,
    mut g_lora: Option<&mut LoraExpert>,
    dx: &mut [f64],
) {
    axpy(&mut g_base.b2, 1.0, d_out);
    g_base.w2.add_outer(1.0, d_out, &trace.act);
    let mut d_act = base.w2.matvec_t(d_out);

    if let (Some(l), Some(gl)) = (lora, g_lora.as_deref_mut()) {
        axpy(&mut gl.bias2, 1.0, d_out);
        gl.layer2.b.add_outer(1.0, d_out, &trace.low2);
        let d_low2 = l.layer2.b.matvec_t(d_out);
        gl.layer2.a.add_outer(1.0, &d_low2, &trace.act);
        axpy(&mut d_act, 1.0, &l.layer2.a.matvec_t(&d_low2));
    }

    let d_pre: Vec<f64> = d_act
        .iter()
        .zip(&trace.pre)
        .map(|(&g, &p)| g * gelu_grad(p))
        .collect();

    axpy(&mut g_base.b1, 1.0, &d_pre);
    g_base.w1.add_outer(1.0, &d_pre, &trace.x);
    axpy(dx, 1.0, &base.w1.matvec_t(&d_pre));

    if let (Some(l), Some(gl)) = (lora, g_lora) {
        axpy(&mut gl.bias1, 1.0, &d_pre);
        gl.layer1.b.add_outer(1.0, &d_pre, &trace.low1);
        let d_low1 = l.layer1.b.matvec_t(&d_pre);
        gl.layer1.a.add_outer(1.0, &d_low1, &trace.x);
        axpy(dx, 1.0, &l.layer1.a.matvec_t(&d_low1));
    }
}
