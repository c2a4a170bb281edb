//! Stage II: joint fine-tuning of the assembled model over all tasks.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lifecycle::UnifiedModel;
use crate::params::Parameters;
use crate::trainer::sequence::{sample_size, sse, unified_loss};
use crate::trainer::stage1::{check_loss, TrainConfig};
use crate::trainer::suite::SyntheticSuite;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub tasks: Vec<String>,
    /// Training loss (noise on) per task, one entry per step.
    pub loss_curves: Vec<Vec<f64>>,
    /// Noise-off loss per task after the last update.
    pub final_losses: Vec<f64>,
    /// Fraction of routing selections that went to each expert, per task.
    pub usage: Vec<Vec<f64>>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Equality ignoring wall-clock time.
    pub fn same_run(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_clock_secs = other.wall_clock_secs;
        a == *other
    }

    /// Mean over tasks of the loss at each step.
    pub fn joint_curve(&self) -> Vec<f64> {
        let n = self.loss_curves.len() as f64;
        (0..self.steps)
            .map(|s| self.loss_curves.iter().map(|c| c[s]).sum::<f64>() / n)
            .collect()
    }
}

pub(crate) fn stage2_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b10e_0000_0003)
}

/// Plain gradient descent on the mean task loss. Each step visits tasks in
/// suite order and accumulates their gradients before a single update.
pub fn stage2_train(model: &mut UnifiedModel, suite: &SyntheticSuite, train: &TrainConfig) -> Result<TrainReport> {
    train.validate()?;
    let started = Instant::now();
    let indices: Vec<usize> = suite
        .tasks
        .iter()
        .map(|t| model.tasks().index_of(&t.id))
        .collect::<Result<_>>()?;
    if indices.is_empty() {
        return Err(invalid("suite holds no tasks"));
    }
    let seed = model.config().seed;
    let e = model.config().num_experts;
    let n = suite.tasks.len() as f64;
    let mut rng = stage2_rng(seed);
    let mut grads = model.zeros_like();
    let mut curves = vec![Vec::with_capacity(train.steps); indices.len()];
    let mut counts = vec![vec![0u64; e]; indices.len()];

    for step in 0..train.steps {
        grads.fill_zero();
        for (j, (data, &idx)) in suite.tasks.iter().zip(&indices).enumerate() {
            let m = data.samples.len() as f64;
            let mut task_loss = 0.0;
            for sample in &data.samples {
                let (out, cache) = model.sequence_forward(idx, sample, &mut rng, true)?;
                let (l, mut dy) = sse(&out, &sample.targets)?;
                let size = sample_size(sample) as f64;
                let scale = 1.0 / (n * m * size);
                dy.iter_mut().flatten().for_each(|v| *v *= scale);
                model.sequence_backward_into(sample, &cache, &dy, &mut grads)?;
                task_loss += l / size;
                for c in cache.token_caches() {
                    if let Some(g) = &c.gate {
                        g.selected.iter().for_each(|&i| counts[j][i] += 1);
                    }
                }
            }
            task_loss /= m;
            check_loss(data.id.as_str(), step, task_loss)?;
            curves[j].push(task_loss);
        }
        // Task-owned tensors only ever see their own task's loss; undo the
        // 1/N of the joint mean so they move at the single-task rate.
        grads.visit_mut(&mut |name, t| {
            if name.starts_with("task.") {
                t.iter_mut().for_each(|v| *v *= n);
            }
        });
        model.sgd_step(&grads, train.lr);
    }

    let final_losses = suite
        .tasks
        .iter()
        .zip(&indices)
        .map(|(data, &idx)| {
            let l = unified_loss(model, idx, &data.samples)?;
            check_loss(data.id.as_str(), train.steps, l)?;
            Ok(l)
        })
        .collect::<Result<_>>()?;
    let usage = counts
        .iter()
        .map(|c| {
            let total: u64 = c.iter().sum();
            if total == 0 {
                vec![0.0; e]
            } else {
                c.iter().map(|&k| k as f64 / total as f64).collect()
            }
        })
        .collect();
    Ok(TrainReport {
        seed,
        steps: train.steps,
        lr: train.lr,
        tasks: suite.tasks.iter().map(|t| t.id.to_string()).collect(),
        loss_curves: curves,
        final_losses,
        usage,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifecycle::{assemble_unified, RankPolicy};
    use crate::moe::MoeConfig;
    use crate::trainer::stage1::stage1_train;
    use crate::trainer::suite::{make_synthetic_suite, SuiteConfig};

    fn setup() -> (UnifiedModel, SyntheticSuite) {
        let suite = make_synthetic_suite(
            &SuiteConfig {
                samples_per_task: 3,
                grid: 3,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let cfg = MoeConfig {
            d_inner: 16,
            num_experts: 4,
            width_factor: 4,
            ..Default::default()
        };
        let bundle = stage1_train(&suite, 16, &TrainConfig { steps: 20, lr: 0.05 }, 5).unwrap();
        let model = assemble_unified(&bundle, &RankPolicy::result_based(cfg.tau), &cfg).unwrap();
        (model, suite)
    }

    #[test]
    fn report_is_consistent_and_reproducible() {
        let (model, suite) = setup();
        let train = TrainConfig { steps: 15, lr: 0.05 };
        let mut a = model.clone();
        let ra = stage2_train(&mut a, &suite, &train).unwrap();
        let mut b = model.clone();
        let rb = stage2_train(&mut b, &suite, &train).unwrap();
        assert!(ra.same_run(&rb));
        assert_eq!(a, b);
        for u in &ra.usage {
            assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let curve = ra.joint_curve();
        assert!(curve.last().unwrap() < &curve[0]);
        assert!(ra.final_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn every_parameter_family_moves() {
        let (model, suite) = setup();
        let mut trained = model.clone();
        stage2_train(&mut trained, &suite, &TrainConfig { steps: 2, lr: 0.05 }).unwrap();
        let before = model.flatten();
        let after = trained.flatten();
        let names = model.flat_names();
        for family in ["global.", "routed.", ".router.", ".projection.", ".lora."] {
            let moved = names
                .iter()
                .zip(before.iter().zip(&after))
                .any(|(n, (a, b))| n.contains(family) && a != b);
            assert!(moved, "{family} did not change");
        }
    }

    #[test]
    fn unknown_task_in_suite_is_rejected() {
        let (model, mut suite) = setup();
        suite.tasks[0].id = "ghost".into();
        let mut m = model;
        assert!(stage2_train(&mut m, &suite, &TrainConfig { steps: 1, lr: 0.1 }).is_err());
    }
}
