//! Three-way comparison under one step budget: a specialist per task, one
//! fully shared dense model, and the two-stage expert pipeline.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lifecycle::{assemble_unified, DenseTaskModel, RankPolicy};
use crate::moe::MoeConfig;
use crate::params::Parameters;
use crate::trainer::sequence::{dense_loss, dense_loss_grad};
use crate::trainer::stage1::{check_loss, dense_init, stage1_train, train_dense, TrainConfig};
use crate::trainer::stage2::stage2_train;
use crate::trainer::suite::SyntheticSuite;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferenceConfig {
    pub moe: MoeConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Allowed relative excess of the expert model over the specialist.
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub seed: u64,
    pub tasks: Vec<String>,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub task_specific: Vec<f64>,
    pub naive_sharing: Vec<f64>,
    pub biomoe: Vec<f64>,
    pub tolerance: f64,
}

impl InterferenceReport {
    pub fn naive_is_worst(&self) -> bool {
        self.naive_sharing.iter().zip(&self.biomoe).all(|(n, b)| n >= b)
    }

    /// `biomoe / task_specific - 1` per task.
    pub fn relative_gap(&self) -> Vec<f64> {
        self.biomoe.iter().zip(&self.task_specific).map(|(b, s)| b / s - 1.0).collect()
    }

    pub fn within_tolerance(&self) -> bool {
        self.relative_gap().iter().all(|g| *g <= self.tolerance)
    }
}

/// One dense model trained on the mean loss of every task.
fn train_shared(model: &mut DenseTaskModel, suite: &SyntheticSuite, train: &TrainConfig) -> Result<()> {
    let mut grads = model.zeros_like();
    let w = 1.0 / suite.tasks.len() as f64;
    for step in 0..train.steps {
        grads.fill_zero();
        let mut joint = 0.0;
        for t in &suite.tasks {
            joint += w * dense_loss_grad(model, &t.samples, w, &mut grads)?;
        }
        check_loss("shared", step, joint)?;
        model.sgd_step(&grads, train.lr);
    }
    Ok(())
}

pub fn interference_report(suite: &SyntheticSuite, cfg: &InterferenceConfig) -> Result<InterferenceReport> {
    cfg.moe.validate()?;
    cfg.stage1.validate()?;
    cfg.stage2.validate()?;
    let seed = cfg.moe.seed;

    // (c) two-stage pipeline; its Stage-I models double as the specialists'
    // first leg.
    let bundle = stage1_train(suite, cfg.moe.d_inner, &cfg.stage1, seed)?;
    let mut model = assemble_unified(&bundle, &RankPolicy::result_based(cfg.moe.tau), &cfg.moe)?;
    let biomoe = stage2_train(&mut model, suite, &cfg.stage2)?.final_losses;

    // (a) specialists continue for the Stage-II budget on their own task.
    let task_specific = suite
        .tasks
        .iter()
        .zip(&bundle.tasks)
        .map(|(data, t)| {
            let mut m = t.model.clone();
            train_dense(&mut m, data, &cfg.stage2)?;
            dense_loss(&m, &data.samples)
        })
        .collect::<Result<Vec<_>>>()?;

    // (b) one shared model for everything, on the same two-phase schedule.
    let mut shared = dense_init(suite.config.d_model, cfg.moe.d_inner, seed);
    train_shared(&mut shared, suite, &cfg.stage1)?;
    train_shared(&mut shared, suite, &cfg.stage2)?;
    let naive_sharing = suite
        .tasks
        .iter()
        .map(|t| dense_loss(&shared, &t.samples))
        .collect::<Result<Vec<_>>>()?;

    Ok(InterferenceReport {
        seed,
        tasks: suite.tasks.iter().map(|t| t.id.to_string()).collect(),
        stage1_steps: cfg.stage1.steps,
        stage2_steps: cfg.stage2.steps,
        task_specific,
        naive_sharing,
        biomoe,
        tolerance: cfg.tolerance,
    })
}
