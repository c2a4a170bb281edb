//! Small random fixtures shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::lifecycle::{
    assemble_unified, DenseTaskModel, RankPolicy, StageOneBundle, StageOneMeta, StageOneTask, TaskId, UnifiedModel,
};
use crate::moe::{structure_features, ExpertFfn, Linear, MoeConfig, StructureFeatures};
use crate::params::Parameters;

pub fn small_config() -> MoeConfig {
    MoeConfig {
        d_model: 6,
        d_inner: 12,
        num_experts: 3,
        top_k: 2,
        width_factor: 4,
        num_landmarks: 2,
        tau: 1.0,
        noise_std: 1.0,
        seed: 3,
    }
}

pub fn random_bundle(n: usize, d: usize, h: usize, seed: u64) -> StageOneBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = (0..n)
        .map(|j| {
            let mut model = DenseTaskModel {
                projection: Linear::random(d, d, 0.3, &mut rng),
                ffn: ExpertFfn::random(d, h, 0.4, &mut rng),
            };
            model.projection.bias.iter_mut().for_each(|b| *b = 0.1);
            model.ffn.b1.iter_mut().enumerate().for_each(|(i, b)| *b = 0.05 * (i + j) as f64);
            StageOneTask {
                id: TaskId::new(format!("t{j}")),
                model,
                meta: StageOneMeta {
                    steps: 0,
                    initial_loss: 1.0,
                    final_loss: 1.0,
                    probe_grad_norm: 1.0 + j as f64,
                },
            }
        })
        .collect();
    StageOneBundle { seed, tasks }
}

/// Assembled model with routers and routed experts scaled up so gating is
/// far from uniform.
pub fn small_model(n_tasks: usize, seed: u64) -> UnifiedModel {
    let cfg = small_config();
    let bundle = random_bundle(n_tasks, cfg.d_model, cfg.d_inner, seed);
    let mut m = assemble_unified(&bundle, &RankPolicy::result_based(cfg.tau), &cfg).unwrap();
    m.visit_mut(&mut |name, v| {
        if name.contains("router") || name.starts_with("routed") {
            v.iter_mut().for_each(|x| *x *= 25.0);
        }
    });
    m
}

pub fn token(d: usize, seed: u64) -> (Vec<f64>, Vec<f64>, StructureFeatures) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pooled = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let s = structure_features(&[(1.0, 2.0), (3.5, 0.5)], (2.0, 1.0), 2).unwrap();
    (x, pooled, s)
}
