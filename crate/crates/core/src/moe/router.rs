//! Structure-aware gating: landmark offsets, sequence pooling and noisy top-K
//! selection over routed experts.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};
use crate::moe::linear::Router;
use crate::numerics::{softmax, top_k_indices};

/// Offsets from a token to each landmark, laid out as
/// `(u_1 - u_x, v_1 - v_x, ..., u_M - u_x, v_M - v_x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureFeatures {
    pub deltas: Vec<f64>,
}

impl StructureFeatures {
    pub fn num_landmarks(&self) -> usize {
        self.deltas.len() / 2
    }
}

pub fn structure_features(
    landmarks: &[(f64, f64)],
    token_pos: (f64, f64),
    num_landmarks: usize,
) -> Result<StructureFeatures> {
    if landmarks.len() != num_landmarks {
        return Err(config(format!(
            "expected {num_landmarks} landmarks, got {}",
            landmarks.len()
        )));
    }
    let (ux, vx) = token_pos;
    if !ux.is_finite() || !vx.is_finite() {
        return Err(invalid("token position is not finite"));
    }
    let mut deltas = Vec::with_capacity(2 * num_landmarks);
    for &(u, v) in landmarks {
        if !u.is_finite() || !v.is_finite() {
            return Err(invalid("landmark coordinate is not finite"));
        }
        deltas.push(u - ux);
        deltas.push(v - vx);
    }
    Ok(StructureFeatures { deltas })
}

/// Arithmetic mean over the token sequence.
pub fn pool_sequence(tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = tokens.first().ok_or_else(|| invalid("cannot pool an empty sequence"))?;
    let mut acc = vec![0.0; first.len()];
    for t in tokens {
        if t.len() != acc.len() {
            return Err(invalid("tokens have inconsistent widths"));
        }
        for (a, v) in acc.iter_mut().zip(t) {
            *a += v;
        }
    }
    let n = tokens.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `concat(x, pooled, s)`
pub fn gate_input(x: &[f64], pooled: &[f64], s: &StructureFeatures) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len() + pooled.len() + s.deltas.len());
    g.extend_from_slice(x);
    g.extend_from_slice(pooled);
    g.extend_from_slice(&s.deltas);
    g
}

/// Outcome of one routing decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    /// Post-softmax, pre-mask.
    pub probabilities: Vec<f64>,
    /// `top_k(probabilities)`; exactly `K` nonzeros.
    pub weights: Vec<f64>,
    /// Selected experts in descending probability order.
    pub selected: Vec<usize>,
    /// Noise added to the logits (all zeros when none was drawn).
    pub noise: Vec<f64>,
}

/// Draws `noise_std · N(0, 1)` per expert.
pub fn sample_gate_noise<R: Rng + ?Sized>(rng: &mut R, num_experts: usize, noise_std: f64) -> Vec<f64> {
    (0..num_experts)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            noise_std * z
        })
        .collect()
}

/// `top_K(softmax(R(g) + ε))`, optionally with a frozen expert selection.
pub fn route(
    router: &Router,
    g_in: &[f64],
    top_k: usize,
    noise: Option<&[f64]>,
    forced: Option<&[usize]>,
) -> Result<GateDecision> {
    if g_in.len() != router.d_in() {
        return Err(config(format!(
            "gate input has width {}, router expects {}",
            g_in.len(),
            router.d_in()
        )));
    }
    let e = router.d_out();
    let mut logits = router.forward(g_in);
    let noise = match noise {
        Some(n) if n.len() != e => {
            return Err(invalid(format!("noise has {} entries, expected {e}", n.len())))
        }
        Some(n) => {
            for (l, v) in logits.iter_mut().zip(n) {
                *l += v;
            }
            n.to_vec()
        }
        None => vec![0.0; e],
    };
    let probabilities = softmax(&logits)?;
    let selected = match forced {
        Some(sel) => {
            if sel.len() != top_k || sel.iter().any(|&i| i >= e) {
                return Err(invalid("forced selection does not match top_k / expert count"));
            }
            sel.to_vec()
        }
        None => top_k_indices(&probabilities, top_k)?,
    };
    let mut weights = vec![0.0; e];
    for &i in &selected {
        weights[i] = probabilities[i];
    }
    Ok(GateDecision {
        probabilities,
        weights,
        selected,
        noise,
    })
}

/// `dL/dlogits` for a softmax given `dL/dp`.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - inner)).collect()
}
