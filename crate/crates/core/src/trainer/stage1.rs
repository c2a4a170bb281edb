//! Stage I: one dense model per task, trained on that task's data only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::lifecycle::{DenseTaskModel, StageOneBundle, StageOneMeta, StageOneTask};
use crate::moe::{ExpertFfn, Linear};
use crate::numerics::Matrix;
use crate::params::Parameters;
use crate::trainer::sequence::{dense_loss, dense_loss_grad};
use crate::trainer::suite::{SyntheticSuite, TaskData};

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config("steps must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Shared dense starting point: identity projection, fan-in scaled FFN.
pub fn dense_init(d_model: usize, d_inner: usize, seed: u64) -> DenseTaskModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b10e_0000_0001);
    let n1 = Normal::new(0.0, 1.0 / (d_model as f64).sqrt()).unwrap();
    let n2 = Normal::new(0.0, 1.0 / (d_inner as f64).sqrt()).unwrap();
    let w1 = Matrix::from_fn(d_inner, d_model, |_, _| n1.sample(&mut rng));
    let w2 = Matrix::from_fn(d_model, d_inner, |_, _| n2.sample(&mut rng));
    DenseTaskModel {
        projection: Linear::identity(d_model),
        ffn: ExpertFfn {
            w1,
            b1: vec![0.0; d_inner],
            w2,
            b2: vec![0.0; d_model],
        },
    }
}

pub(crate) fn check_loss(task: &str, step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Diverged {
            task: task.to_string(),
            step,
            loss,
        });
    }
    Ok(())
}

/// Full-batch gradient descent of one dense model on one task.
/// Returns the loss before every step.
pub fn train_dense(model: &mut DenseTaskModel, data: &TaskData, train: &TrainConfig) -> Result<(Vec<f64>, f64)> {
    train.validate()?;
    let mut grads = model.zeros_like();
    let mut curve = Vec::with_capacity(train.steps);
    let mut grad_norm = 0.0;
    for step in 0..train.steps {
        grads.fill_zero();
        let loss = dense_loss_grad(model, &data.samples, 1.0, &mut grads)?;
        check_loss(data.id.as_str(), step, loss)?;
        curve.push(loss);
        grad_norm = grads.flatten().iter().map(|g| g * g).sum::<f64>().sqrt();
        model.sgd_step(&grads, train.lr);
    }
    Ok((curve, grad_norm))
}

pub fn stage1_train(suite: &SyntheticSuite, d_inner: usize, train: &TrainConfig, seed: u64) -> Result<StageOneBundle> {
    train.validate()?;
    if d_inner == 0 {
        return Err(config("d_inner must be positive"));
    }
    let init = dense_init(suite.config.d_model, d_inner, seed);
    let tasks = suite
        .tasks
        .iter()
        .map(|data| {
            let mut model = init.clone();
            let (curve, probe_grad_norm) = train_dense(&mut model, data, train)?;
            let final_loss = dense_loss(&model, &data.samples)?;
            check_loss(data.id.as_str(), train.steps, final_loss)?;
            Ok(StageOneTask {
                id: data.id.clone(),
                model,
                meta: StageOneMeta {
                    steps: train.steps,
                    initial_loss: curve[0],
                    final_loss,
                    probe_grad_norm,
                },
            })
        })
        .collect::<Result<_>>()?;
    Ok(StageOneBundle { seed, tasks })
}

/// Pairwise cosine similarity of per-task loss gradients at `model`.
pub fn gradient_conflict(suite: &SyntheticSuite, model: &DenseTaskModel) -> Result<Vec<Vec<f64>>> {
    let grads: Vec<Vec<f64>> = suite
        .tasks
        .iter()
        .map(|t| {
            let mut g = model.zeros_like();
            dense_loss_grad(model, &t.samples, 1.0, &mut g)?;
            Ok(g.flatten())
        })
        .collect::<Result<_>>()?;
    let norms: Vec<f64> = grads.iter().map(|g| crate::numerics::norm(g)).collect();
    Ok(grads
        .iter()
        .zip(&norms)
        .map(|(a, na)| {
            grads
                .iter()
                .zip(&norms)
                .map(|(b, nb)| crate::numerics::dot(a, b) / (na * nb).max(f64::MIN_POSITIVE))
                .collect()
        })
        .collect())
}
