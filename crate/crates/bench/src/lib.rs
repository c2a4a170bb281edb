//! Fixtures shared by the benchmarks.

use biomoe_core::moe::{structure_features, StructureFeatures};
use biomoe_core::pair_filter::{Direction, FilterSpec, MetricRule, MetricTable};
use biomoe_core::trainer::{make_synthetic_suite, stage1_train, SuiteConfig, SyntheticSuite, TrainConfig};
use biomoe_core::{assemble_unified, Matrix, MoeConfig, RankPolicy, UnifiedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5)
}

/// The canonical 4-task model right after assembly, plus its suite.
pub fn canonical_model() -> (UnifiedModel, SyntheticSuite) {
    let suite = make_synthetic_suite(&SuiteConfig::default(), 0).unwrap();
    let moe = MoeConfig {
        d_model: suite.config.d_model,
        num_landmarks: suite.config.num_landmarks,
        ..MoeConfig::default()
    };
    let bundle = stage1_train(&suite, moe.d_inner, &TrainConfig { steps: 20, lr: 0.05 }, 0).unwrap();
    let model = assemble_unified(&bundle, &RankPolicy::result_based(moe.tau), &moe).unwrap();
    (model, suite)
}

/// One token's inputs for `model`.
pub fn token(model: &UnifiedModel, seed: u64) -> (Vec<f64>, Vec<f64>, StructureFeatures) {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |n: usize| (0..n).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<f64>>();
    let (x, pooled) = (v(cfg.d_model), v(cfg.d_model));
    let lms: Vec<(f64, f64)> = (0..cfg.num_landmarks).map(|i| (i as f64, 1.5)).collect();
    let s = structure_features(&lms, (1.0, 2.0), cfg.num_landmarks).unwrap();
    (x, pooled, s)
}

pub fn metric_table(rows: usize, seed: u64) -> (MetricTable, FilterSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = ["face_sim", "pose_dist", "exp_dist", "bg_sim"].map(String::from).to_vec();
    let data = (0..rows).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
    let ids = (0..rows).map(|i| format!("s{i}")).collect();
    let table = MetricTable::new(names.clone(), ids, data).unwrap();
    let dirs = [Direction::HigherBetter, Direction::LowerBetter, Direction::LowerBetter, Direction::HigherBetter];
    let fractions = [0.8, 0.8, 0.8, 0.5];
    let rules = (0..4)
        .map(|i| MetricRule { name: names[i].clone(), direction: dirs[i], keep_fraction: fractions[i] })
        .collect();
    (table, FilterSpec { rules })
}
