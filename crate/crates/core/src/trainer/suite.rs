//! Synthetic multi-task benchmark with built-in cross-task conflict.
//!
//! Every task regresses the same shared map plus a 2-D "conflict" component
//! rotated by a task-specific angle `2πj/N` and embedded into the output
//! space. Tasks `j` and `j + N/2` therefore disagree in sign on that
//! component, which is what makes a single shared network a poor fit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::lifecycle::TaskId;
use crate::numerics::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    pub d_model: usize,
    /// Tokens form a `grid × grid` map.
    pub grid: usize,
    pub samples_per_task: usize,
    pub num_landmarks: usize,
    /// Magnitude of the task-dependent component relative to the shared map.
    pub conflict_scale: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            d_model: 8,
            grid: 4,
            samples_per_task: 16,
            num_landmarks: 5,
            conflict_scale: 4.0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks < 2 {
            return Err(config(format!("need at least 2 tasks, got {}", self.n_tasks)));
        }
        if self.samples_per_task == 0 || self.grid == 0 || self.d_model < 2 {
            return Err(config("samples_per_task and grid must be positive, d_model >= 2"));
        }
        if !(self.conflict_scale.is_finite() && self.conflict_scale >= 0.0) {
            return Err(config("conflict_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One token map with its landmarks and regression targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<Vec<f64>>,
    /// `(u, v)` of each token on the token grid.
    pub positions: Vec<(f64, f64)>,
    pub landmarks: Vec<(f64, f64)>,
    pub targets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub id: TaskId,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSuite {
    pub config: SuiteConfig,
    pub seed: u64,
    pub tasks: Vec<TaskData>,
}

impl SyntheticSuite {
    pub fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }

    /// Keeps only the listed tasks, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = self.clone();
        out.tasks = indices.iter().map(|&i| self.tasks[i].clone()).collect();
        out.config.n_tasks = out.tasks.len();
        out
    }
}

/// Fixed target generator shared by every task.
struct TargetMaps {
    shared: Matrix,
    conflict: Matrix,
    /// Orthonormal `d × 2` embedding of the conflict plane.
    embed: Matrix,
}

impl TargetMaps {
    fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.5 / (d as f64).sqrt();
        let normal = Normal::new(0.0, scale).unwrap();
        let shared = Matrix::from_fn(d, d, |_, _| normal.sample(rng));
        let conflict = Matrix::from_fn(2, d, |_, _| normal.sample(rng));
        // Gram-Schmidt on two random directions.
        let mut e0: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n0 = dot(&e0, &e0).sqrt();
        e0.iter_mut().for_each(|v| *v /= n0);
        let mut e1: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let p = dot(&e0, &e1);
        e1.iter_mut().zip(&e0).for_each(|(v, u)| *v -= p * u);
        let n1 = dot(&e1, &e1).sqrt();
        e1.iter_mut().for_each(|v| *v /= n1);
        let embed = Matrix::from_fn(d, 2, |i, j| if j == 0 { e0[i] } else { e1[i] });
        Self { shared, conflict, embed }
    }

    fn target(&self, x: &[f64], angle: f64, scale: f64) -> Vec<f64> {
        let mut y: Vec<f64> = self.shared.matvec(x).into_iter().map(f64::tanh).collect();
        let c: Vec<f64> = self.conflict.matvec(x).into_iter().map(f64::tanh).collect();
        let (sin, cos) = angle.sin_cos();
        let rotated = [cos * c[0] - sin * c[1], sin * c[0] + cos * c[1]];
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += scale * (self.embed[(i, 0)] * rotated[0] + self.embed[(i, 1)] * rotated[1]);
        }
        y
    }
}

/// Token positions of a `grid × grid` map in row-major order.
pub fn grid_positions(grid_w: usize, grid_h: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(grid_w * grid_h);
    for row in 0..grid_h {
        for col in 0..grid_w {
            out.push((col as f64, row as f64));
        }
    }
    out
}

/// Landmarks on an ellipse around the grid centre, jittered per sample.
pub fn landmark_layout<R: Rng + ?Sized>(grid: usize, m: usize, jitter: f64, rng: &mut R) -> Vec<(f64, f64)> {
    let c = (grid as f64 - 1.0) / 2.0;
    let radius = grid as f64 / 4.0;
    (0..m)
        .map(|k| {
            let angle = std::f64::consts::TAU * k as f64 / m as f64;
            let du: f64 = rng.sample(StandardNormal);
            let dv: f64 = rng.sample(StandardNormal);
            (c + radius * angle.cos() + jitter * du, c + radius * angle.sin() + jitter * dv)
        })
        .collect()
}

pub fn random_tokens<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

pub fn make_synthetic_suite(cfg: &SuiteConfig, seed: u64) -> Result<SyntheticSuite> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps = TargetMaps::new(cfg.d_model, &mut rng);
    let positions = grid_positions(cfg.grid, cfg.grid);
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for j in 0..cfg.n_tasks {
        let angle = std::f64::consts::TAU * j as f64 / cfg.n_tasks as f64;
        let samples = (0..cfg.samples_per_task)
            .map(|_| {
                let tokens = random_tokens(positions.len(), cfg.d_model, &mut rng);
                let landmarks = landmark_layout(cfg.grid, cfg.num_landmarks, 0.25, &mut rng);
                let targets = tokens
                    .iter()
                    .map(|x| maps.target(x, angle, cfg.conflict_scale))
                    .collect();
                Sample {
                    tokens,
                    positions: positions.clone(),
                    landmarks,
                    targets,
                }
            })
            .collect();
        tasks.push(TaskData {
            id: TaskId::new(format!("task{j}")),
            samples,
        });
    }
    Ok(SyntheticSuite {
        config: cfg.clone(),
        seed,
        tasks,
    })
}
