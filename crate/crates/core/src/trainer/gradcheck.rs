//! Finite-difference verification of the full per-task forward:
//! projection, expert layer and loss, with noise and selection frozen.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lifecycle::UnifiedModel;
use crate::params::Parameters;
use crate::trainer::sequence::{sse, FrozenGate};
use crate::trainer::stage2::stage2_rng;
use crate::trainer::suite::Sample;

pub const FD_STEP: f64 = 1e-3;

/// Denominator floor for relative errors: below this magnitude both
/// gradients are treated as zero-valued and compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub task: String,
    pub num_params: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub tolerance: f64,
    pub passed: bool,
}

fn outputs(model: &UnifiedModel, task: usize, sample: &Sample, frozen: &FrozenGate) -> Result<Vec<Vec<f64>>> {
    Ok(model.sequence_forward_frozen(task, sample, frozen)?.0)
}

/// `L(y⁺) - L(y⁻)` for the squared error, written as a product so the two
/// large sums never get subtracted.
fn sse_difference(up: &[Vec<f64>], down: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for ((u, d), t) in up.iter().zip(down).zip(targets) {
        for ((a, b), c) in u.iter().zip(d).zip(t) {
            acc += (a - b) * (a + b - 2.0 * c);
        }
    }
    acc
}

/// Draws one training-mode gate realization for `sample`.
pub fn freeze_gate(model: &UnifiedModel, task: usize, sample: &Sample, seed: u64) -> Result<FrozenGate> {
    let mut rng = stage2_rng(seed);
    Ok(model.sequence_forward(task, sample, &mut rng, true)?.1.frozen_gate())
}

pub fn analytic_gradient(model: &UnifiedModel, task: usize, sample: &Sample, frozen: &FrozenGate) -> Result<Vec<f64>> {
    let (out, cache) = model.sequence_forward_frozen(task, sample, frozen)?;
    let (_, dy) = sse(&out, &sample.targets)?;
    let mut grads = model.zeros_like();
    model.sequence_backward_into(sample, &cache, &dy, &mut grads)?;
    Ok(grads.flatten())
}

/// Five-point central differences over every parameter. The fourth-order
/// stencil allows a step large enough that roundoff stays far below the
/// smallest gradients being checked.
pub fn numeric_gradient(model: &UnifiedModel, task: usize, sample: &Sample, frozen: &FrozenGate) -> Result<Vec<f64>> {
    let theta = model.flatten();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(theta.len());
    let mut t = theta.clone();
    let mut eval = |t: &mut Vec<f64>, i: usize, delta: f64| -> Result<Vec<Vec<f64>>> {
        t[i] = theta[i] + delta;
        probe.assign_flat(t);
        let y = outputs(&probe, task, sample, frozen);
        t[i] = theta[i];
        y
    };
    for i in 0..theta.len() {
        let (p1, m1) = (eval(&mut t, i, FD_STEP)?, eval(&mut t, i, -FD_STEP)?);
        let (p2, m2) = (eval(&mut t, i, 2.0 * FD_STEP)?, eval(&mut t, i, -2.0 * FD_STEP)?);
        let d1 = sse_difference(&p1, &m1, &sample.targets);
        let d2 = sse_difference(&p2, &m2, &sample.targets);
        out.push((8.0 * d1 - d2) / (12.0 * FD_STEP));
    }
    Ok(out)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn compare_gradients(
    task: &str,
    names: &[String],
    analytic: &[f64],
    numeric: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(tolerance > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if analytic.len() != numeric.len() || names.len() != analytic.len() {
        return Err(invalid("gradient vectors differ in length"));
    }
    let mut worst = (0.0, String::new());
    for ((a, n), name) in analytic.iter().zip(numeric).zip(names) {
        let e = relative_error(*a, *n);
        // NaN must not hide behind a comparison.
        if !(e <= worst.0) {
            worst = (e, name.clone());
        }
    }
    Ok(GradCheckReport {
        task: task.to_string(),
        num_params: analytic.len(),
        max_rel_error: worst.0,
        worst_param: worst.1,
        tolerance,
        passed: worst.0 < tolerance,
    })
}

/// Checks every parameter gradient of task `task` on `sample`. The gate
/// realization is drawn from `seed` and then held fixed.
pub fn grad_check(
    model: &UnifiedModel,
    task: usize,
    sample: &Sample,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let frozen = freeze_gate(model, task, sample, seed)?;
    let analytic = analytic_gradient(model, task, sample, &frozen)?;
    let numeric = numeric_gradient(model, task, sample, &frozen)?;
    let id = model.tasks().slots()[task].id.to_string();
    compare_gradients(&id, &model.flat_names(), &analytic, &numeric, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::small_model;
    use crate::trainer::suite::{grid_positions, random_tokens};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sample {
            tokens: random_tokens(4, 6, &mut rng),
            positions: grid_positions(2, 2),
            landmarks: vec![(0.3, 1.7), (1.4, -0.2)],
            targets: random_tokens(4, 6, &mut rng),
        }
    }

    #[test]
    fn full_forward_gradients_match() {
        let m = small_model(2, 21);
        for task in 0..2 {
            let r = grad_check(&m, task, &sample(task as u64), 4, 1e-5).unwrap();
            assert!(r.passed, "{r:?}");
            assert_eq!(r.num_params, m.num_params());
        }
    }

    #[test]
    fn injected_error_is_caught() {
        let m = small_model(2, 22);
        let s = sample(3);
        let frozen = freeze_gate(&m, 1, &s, 0).unwrap();
        let mut a = analytic_gradient(&m, 1, &s, &frozen).unwrap();
        let n = numeric_gradient(&m, 1, &s, &frozen).unwrap();
        let names = m.flat_names();
        assert!(compare_gradients("t1", &names, &a, &n, 1e-5).unwrap().passed);
        let (i, _) = a
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .unwrap();
        a[i] *= 1.1;
        let r = compare_gradients("t1", &names, &a, &n, 1e-5).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_param, names[i]);
        // A vacuous bound passes anyway.
        assert!(compare_gradients("t1", &names, &a, &n, 1.0).unwrap().passed);
        assert!(compare_gradients("t1", &names, &a, &n, 0.0).is_err());
    }

    #[test]
    fn nan_never_passes() {
        let names = vec!["x".to_string()];
        let r = compare_gradients("t", &names, &[f64::NAN], &[1.0], 1.0).unwrap();
        assert!(!r.passed);
    }
}
