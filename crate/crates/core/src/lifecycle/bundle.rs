//! Stage-I artifacts: one dense projection + FFN model per task, trained in
//! isolation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lifecycle::TaskId;
use crate::moe::{ffn::ffn_backward, ffn::ffn_forward, ffn::FfnTrace, ExpertFfn, TaskProjection};
use crate::params::Parameters;

/// Stage-I single-task network: `y_t = ffn(projection(x_t))` per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTaskModel {
    pub projection: TaskProjection,
    pub ffn: ExpertFfn,
}

#[derive(Debug, Clone)]
pub struct DenseTrace {
    projected: Vec<Vec<f64>>,
    traces: Vec<FfnTrace>,
}

impl DenseTaskModel {
    pub fn forward(&self, tokens: &[Vec<f64>]) -> Vec<Vec<f64>> {
        tokens
            .iter()
            .map(|x| self.ffn.forward(&self.projection.forward(x)))
            .collect()
    }

    pub fn forward_traced(&self, tokens: &[Vec<f64>]) -> (Vec<Vec<f64>>, DenseTrace) {
        let projected: Vec<Vec<f64>> = tokens.iter().map(|x| self.projection.forward(x)).collect();
        let traces: Vec<FfnTrace> = projected.iter().map(|z| ffn_forward(&self.ffn, None, z)).collect();
        let outputs = traces.iter().map(|t| t.out.clone()).collect();
        (outputs, DenseTrace { projected, traces })
    }

    /// Accumulates gradients for per-token upstream gradients `dy`.
    pub fn backward(&self, tokens: &[Vec<f64>], trace: &DenseTrace, dy: &[Vec<f64>], grads: &mut DenseTaskModel) {
        for ((x, (z, t)), g) in tokens.iter().zip(trace.projected.iter().zip(&trace.traces)).zip(dy) {
            let mut dz = vec![0.0; z.len()];
            ffn_backward(&self.ffn, None, t, g, &mut grads.ffn, None, &mut dz);
            self.projection.backward(x, &dz, &mut grads.projection);
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }
}

impl Parameters for DenseTaskModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.projection.visit("projection", f);
        self.ffn.visit("ffn", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.projection.visit_mut("projection", f);
        self.ffn.visit_mut("ffn", f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneMeta {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Frobenius norm of the last full-batch gradient of this task.
    pub probe_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneTask {
    pub id: TaskId,
    pub model: DenseTaskModel,
    pub meta: StageOneMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneBundle {
    pub seed: u64,
    pub tasks: Vec<StageOneTask>,
}

impl StageOneBundle {
    pub fn validate(&self) -> Result<()> {
        let first = self.tasks.first().ok_or_else(|| invalid("bundle holds no tasks"))?;
        for t in &self.tasks {
            if !t.model.ffn.same_shape(&first.model.ffn)
                || t.model.projection.weight.shape() != first.model.projection.weight.shape()
            {
                return Err(invalid(format!("task `{}` has a different shape", t.id)));
            }
            if t.model.projection.d_in() != t.model.projection.d_out() {
                return Err(invalid(format!("task `{}` projection is not square", t.id)));
            }
            if !t.model.all_finite() {
                return Err(invalid(format!("task `{}` has non-finite weights", t.id)));
            }
        }
        for (i, a) in self.tasks.iter().enumerate() {
            if self.tasks[i + 1..].iter().any(|b| b.id == a.id) {
                return Err(invalid(format!("duplicate task id `{}`", a.id)));
            }
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.tasks[0].model.ffn.d_model()
    }

    pub fn d_inner(&self) -> usize {
        self.tasks[0].model.ffn.d_hidden()
    }
}

/// Elementwise mean of every task's FFN weights and biases.
pub fn consensus_init(bundle: &StageOneBundle) -> Result<ExpertFfn> {
    bundle.validate()?;
    let n = bundle.tasks.len() as f64;
    let first = &bundle.tasks[0].model.ffn;
    let mut acc = ExpertFfn::zeros(first.d_model(), first.d_hidden());
    for t in &bundle.tasks {
        let f = &t.model.ffn;
        add_into(acc.w1.data_mut(), f.w1.data());
        add_into(&mut acc.b1, &f.b1);
        add_into(acc.w2.data_mut(), f.w2.data());
        add_into(&mut acc.b2, &f.b2);
    }
    for v in acc
        .w1
        .data_mut()
        .iter_mut()
        .chain(acc.b1.iter_mut())
        .chain(acc.w2.data_mut().iter_mut())
        .chain(acc.b2.iter_mut())
    {
        *v /= n;
    }
    Ok(acc)
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

