//! Rank allocation for task experts.
//!
//! The result-based rule reads the SVD spectrum of each Stage-I residual
//! `W_task - W_global` and keeps the smallest rank whose cumulative energy
//! reaches `tau`. Gradient-proportional and uniform allocations exist as
//! ablation baselines.

use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};
use crate::lifecycle::StageOneBundle;
use crate::moe::LoraFactors;
use crate::numerics::{svd, Matrix};

/// Below this total residual energy a task expert gets rank 0.
pub const ZERO_ENERGY: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    ResultBased,
    GradientBased,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPolicy {
    pub mode: RankMode,
    pub tau: f64,
    /// Total rank budget across tasks (budgeted modes only).
    pub budget: usize,
}

impl RankPolicy {
    pub fn result_based(tau: f64) -> Self {
        Self {
            mode: RankMode::ResultBased,
            tau,
            budget: 0,
        }
    }

    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        match self.mode {
            RankMode::ResultBased if !(self.tau > 0.0 && self.tau <= 1.0) => {
                Err(config(format!("tau must lie in (0, 1], got {}", self.tau)))
            }
            RankMode::GradientBased | RankMode::Uniform if self.budget < num_tasks => Err(config(format!(
                "rank budget {} is smaller than the task count {num_tasks}",
                self.budget
            ))),
            _ => Ok(()),
        }
    }
}

/// Smallest `r` with `Σ_{i<=r} s_i² / Σ s_i² >= tau`; 0 for a zero spectrum.
pub fn energy_rank(singular_values: &[f64], tau: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total < ZERO_ENERGY {
        return 0;
    }
    let mut cum = 0.0;
    let mut r = 0;
    while r < singular_values.len() && cum / total < tau {
        cum += singular_values[r] * singular_values[r];
        r += 1;
    }
    r
}

pub fn residual_rank(w_task: &Matrix, w_global: &Matrix, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(invalid(format!("tau must lie in (0, 1], got {tau}")));
    }
    let residual = w_task.sub(w_global)?;
    Ok(energy_rank(&svd(&residual)?.s, tau))
}

/// Best rank-`r` approximation of `w_task - w_global` as `b · a`, with
/// `b = U_r Σ_r` and `a = V_rᵀ`.
pub fn lora_from_residual(w_task: &Matrix, w_global: &Matrix, r: usize) -> Result<LoraFactors> {
    let residual = w_task.sub(w_global)?;
    let (rows, cols) = residual.shape();
    if r > rows.min(cols) {
        return Err(invalid(format!("rank {r} exceeds min({rows}, {cols})")));
    }
    if r == 0 {
        return Ok(LoraFactors::empty(rows, cols));
    }
    let dec = svd(&residual)?;
    let mut b = dec.u.first_cols(r);
    for i in 0..rows {
        for k in 0..r {
            b[(i, k)] *= dec.s[k];
        }
    }
    LoraFactors::new(dec.vt.first_rows(r), b)
}

/// Ranks proportional to `norms`, each at least 1 and at most `cap`, summing to
/// at most `budget`.
pub fn allocate_by_norms(norms: &[f64], budget: usize, cap: usize) -> Result<Vec<usize>> {
    let n = norms.len();
    if n == 0 {
        return Err(invalid("no gradients to allocate from"));
    }
    if budget < n {
        return Err(invalid(format!("rank budget {budget} is smaller than the task count {n}")));
    }
    if norms.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid("gradient norms must be finite and non-negative"));
    }
    let total: f64 = norms.iter().sum();
    let raw: Vec<f64> = if total > 0.0 {
        norms.iter().map(|v| budget as f64 * v / total).collect()
    } else {
        vec![budget as f64 / n as f64; n]
    };
    let cap = cap.max(1);
    let mut ranks: Vec<usize> = raw.iter().map(|&r| (r.round() as usize).clamp(1, cap)).collect();
    while ranks.iter().sum::<usize>() > budget {
        // Trim the rank that overshoots its share the most.
        let (idx, _) = ranks
            .iter()
            .zip(&raw)
            .enumerate()
            .filter(|(_, (&r, _))| r > 1)
            .map(|(i, (&r, &w))| (i, r as f64 - w))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("budget >= n guarantees a rank above 1");
        ranks[idx] -= 1;
    }
    Ok(ranks)
}

/// Gradient-magnitude baseline: one rank per task from the Frobenius norm of a
/// probe gradient.
pub fn gradient_rank_baseline(
    bundle: &StageOneBundle,
    probe_gradients: &[Vec<f64>],
    budget: usize,
) -> Result<Vec<usize>> {
    if probe_gradients.is_empty() || probe_gradients.iter().any(|g| g.is_empty()) {
        return Err(invalid("empty probe gradients"));
    }
    if probe_gradients.len() != bundle.tasks.len() {
        return Err(invalid("one probe gradient per task is required"));
    }
    let norms: Vec<f64> = probe_gradients
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    allocate_by_norms(&norms, budget, bundle.d_model().min(bundle.d_inner()))
}

/// Per-task `[layer1, layer2]` ranks under `policy`, given the global expert.
pub fn allocate_ranks(
    bundle: &StageOneBundle,
    global: &crate::moe::ExpertFfn,
    policy: &RankPolicy,
) -> Result<Vec<[usize; 2]>> {
    let n = bundle.tasks.len();
    policy.validate(n)?;
    let cap1 = global.w1.rows().min(global.w1.cols());
    let cap2 = global.w2.rows().min(global.w2.cols());
    match policy.mode {
        RankMode::ResultBased => bundle
            .tasks
            .iter()
            .map(|t| {
                Ok([
                    residual_rank(&t.model.ffn.w1, &global.w1, policy.tau)?,
                    residual_rank(&t.model.ffn.w2, &global.w2, policy.tau)?,
                ])
            })
            .collect(),
        RankMode::GradientBased => {
            let norms: Vec<f64> = bundle.tasks.iter().map(|t| t.meta.probe_grad_norm).collect();
            let ranks = allocate_by_norms(&norms, policy.budget, cap1.min(cap2))?;
            Ok(ranks.into_iter().map(|r| [r.min(cap1), r.min(cap2)]).collect())
        }
        RankMode::Uniform => {
            let r = (policy.budget / n).max(1);
            Ok(vec![[r.min(cap1), r.min(cap2)]; n])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn energy_rank_by_hand() {
        // 9 / 14 ≈ 0.643 already clears 0.2
        assert_eq!(energy_rank(&[3.0, 2.0, 1.0], 0.2), 1);
        // 9/14 < 0.7 <= 13/14
        assert_eq!(energy_rank(&[3.0, 2.0, 1.0], 0.7), 2);
        assert_eq!(energy_rank(&[3.0, 2.0, 1.0], 1.0), 3);
        assert_eq!(energy_rank(&[3.0, 2.0, 0.0], 1.0), 2);
        assert_eq!(energy_rank(&[0.0, 0.0], 0.5), 0);
    }

    #[test]
    fn residual_rank_cases() {
        let g = Matrix::zeros(3, 3);
        let t = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        assert_eq!(residual_rank(&t, &g, 0.2).unwrap(), 1);
        assert_eq!(residual_rank(&t, &t, 0.2).unwrap(), 0);
        assert_eq!(residual_rank(&t, &g, 1.0).unwrap(), 3);
        assert!(residual_rank(&t, &Matrix::zeros(2, 3), 0.5).is_err());
        assert!(residual_rank(&t, &g, 0.0).is_err());
    }

    #[test]
    fn lora_rank_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let g = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let full = lora_from_residual(&t, &g, 4).unwrap();
        let res = t.sub(&g).unwrap();
        assert!(full.delta().sub(&res).unwrap().frobenius() < 1e-9);

        let empty = lora_from_residual(&t, &g, 0).unwrap();
        assert_eq!(empty.rank(), 0);
        assert_eq!(empty.delta(), Matrix::zeros(5, 4));
        assert!(lora_from_residual(&t, &g, 5).is_err());

        let u = [1.0, -2.0, 0.5];
        let v = [0.3, 0.1, -0.7, 2.0];
        let rank1 = Matrix::from_fn(3, 4, |i, j| u[i] * v[j]);
        let l = lora_from_residual(&rank1, &Matrix::zeros(3, 4), 1).unwrap();
        assert!(l.delta().sub(&rank1).unwrap().frobenius() < 1e-12);
    }

    #[test]
    fn proportional_allocation() {
        assert_eq!(allocate_by_norms(&[1.0; 4], 16, 64).unwrap(), vec![4; 4]);
        let r = allocate_by_norms(&[10.0, 1.0, 1.0, 1.0], 16, 64).unwrap();
        assert!(r[0] > r[1] && r[0] > r[2] && r[0] > r[3]);
        assert!(r.iter().sum::<usize>() <= 16);
        assert!(allocate_by_norms(&[], 4, 4).is_err());
        assert!(allocate_by_norms(&[1.0, 1.0], 1, 4).is_err());
    }

    proptest! {
        #[test]
        fn allocation_respects_budget(
            norms in prop::collection::vec(0.0f64..100.0, 1..8),
            extra in 0usize..40,
            cap in 1usize..16,
        ) {
            let budget = norms.len() + extra;
            let r = allocate_by_norms(&norms, budget, cap).unwrap();
            prop_assert!(r.iter().sum::<usize>() <= budget);
            prop_assert!(r.iter().all(|&x| x >= 1 && x <= cap));
        }

        #[test]
        fn rank_monotone_in_tau(seed in any::<u64>(), t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Matrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
            let g = Matrix::zeros(4, 6);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(residual_rank(&t, &g, lo).unwrap() <= residual_rank(&t, &g, hi).unwrap());
        }

        #[test]
        fn eckart_young(seed in any::<u64>(), r in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
            let g = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
            let res = t.sub(&g).unwrap();
            let s = svd(&res).unwrap().s;
            let expected: f64 = s[r..].iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = lora_from_residual(&t, &g, r).unwrap().delta().sub(&res).unwrap().frobenius();
            prop_assert!((err - expected).abs() < 1e-9);
        }
    }
}
