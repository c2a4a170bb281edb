//! Token-level forward and backward of the expert layer:
//!
//! `y = f_gl(x) + Σ_i G_i(x) · f_rt_i(x) + f_sp(x)`
//!
//! The task expert term is evaluated as `Σ_k w_k · (f_k(x) - f_gl(x))` where
//! `f_k` is the global expert merged with task residual `k`. A plain task has
//! one residual with `w = 1`; a composed task blends two with a softmax mixer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lifecycle::{TaskExpert, TaskId, UnifiedModel};
use crate::moe::ffn::{ffn_backward, ffn_forward, FfnTrace};
use crate::moe::router::{gate_input, route, sample_gate_noise, softmax_backward, GateDecision, StructureFeatures};
use crate::numerics::{axpy, dot, softmax};

/// Frozen routing inputs for reproducing a previous forward pass exactly.
#[derive(Debug, Clone, Copy, Default)]
pub struct GateControl<'a> {
    pub noise: Option<&'a [f64]>,
    pub selection: Option<&'a [usize]>,
}

#[derive(Debug, Clone)]
struct TaskTerm {
    trace: FfnTrace,
    weight: f64,
}

/// Everything the backward pass needs from one token's forward pass.
#[derive(Debug, Clone)]
pub struct MoeCache {
    version: u64,
    task: usize,
    gate_in: Vec<f64>,
    pub gate: Option<GateDecision>,
    global: FfnTrace,
    routed: Vec<(usize, FfnTrace)>,
    task_terms: Vec<TaskTerm>,
    /// Composition-router probabilities for composed tasks.
    mix: Option<Vec<f64>>,
}

impl MoeCache {
    pub fn task_index(&self) -> usize {
        self.task
    }
}

/// Gradients of one backward call.
#[derive(Debug, Clone)]
pub struct MoeGrads {
    pub params: UnifiedModel,
    pub dx: Vec<f64>,
    pub dpooled: Vec<f64>,
}

impl UnifiedModel {
    /// Routing decision for one token. Noise is drawn only when `training`.
    pub fn gate<R: Rng + ?Sized>(
        &self,
        task: &TaskId,
        x: &[f64],
        pooled: &[f64],
        s: &StructureFeatures,
        rng: &mut R,
        training: bool,
    ) -> Result<GateDecision> {
        let idx = self.tasks().index_of(task)?;
        self.check_token(x, pooled, s)?;
        let noise = self.draw_noise(rng, training);
        let g = gate_input(x, pooled, s);
        route(
            &self.tasks().slots()[idx].router,
            &g,
            self.config().top_k,
            noise.as_deref(),
            None,
        )
    }

    /// Gate probabilities with noise off (post-softmax, pre-top-K).
    pub fn gate_probabilities(
        &self,
        task_index: usize,
        x: &[f64],
        pooled: &[f64],
        s: &StructureFeatures,
    ) -> Result<Vec<f64>> {
        self.check_token(x, pooled, s)?;
        let slot = self
            .tasks()
            .slots()
            .get(task_index)
            .ok_or_else(|| Error::UnknownTask(format!("#{task_index}")))?;
        let g = gate_input(x, pooled, s);
        Ok(route(&slot.router, &g, self.config().top_k, None, None)?.probabilities)
    }

    pub(crate) fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R, training: bool) -> Option<Vec<f64>> {
        let cfg = self.config();
        (training && cfg.noise_std > 0.0 && self.routed_enabled())
            .then(|| sample_gate_noise(rng, cfg.num_experts, cfg.noise_std))
    }

    fn check_token(&self, x: &[f64], pooled: &[f64], s: &StructureFeatures) -> Result<()> {
        let cfg = self.config();
        if x.len() != cfg.d_model || pooled.len() != cfg.d_model || s.deltas.len() != 2 * cfg.num_landmarks {
            return Err(crate::error::config(format!(
                "token inputs have widths {}/{}/{}, expected {}/{}/{}",
                x.len(),
                pooled.len(),
                s.deltas.len(),
                cfg.d_model,
                cfg.d_model,
                2 * cfg.num_landmarks
            )));
        }
        Ok(())
    }

    pub fn moe_forward<R: Rng + ?Sized>(
        &self,
        task: &TaskId,
        x: &[f64],
        pooled: &[f64],
        s: &StructureFeatures,
        rng: &mut R,
        training: bool,
    ) -> Result<(Vec<f64>, MoeCache)> {
        let idx = self.tasks().index_of(task)?;
        let noise = self.draw_noise(rng, training);
        self.moe_forward_with(
            idx,
            x,
            pooled,
            s,
            GateControl {
                noise: noise.as_deref(),
                selection: None,
            },
        )
    }

    /// Forward with explicit noise and, optionally, a frozen selection.
    pub fn moe_forward_with(
        &self,
        task_index: usize,
        x: &[f64],
        pooled: &[f64],
        s: &StructureFeatures,
        control: GateControl<'_>,
    ) -> Result<(Vec<f64>, MoeCache)> {
        self.check_token(x, pooled, s)?;
        let slot = self
            .tasks()
            .slots()
            .get(task_index)
            .ok_or_else(|| Error::UnknownTask(format!("#{task_index}")))?;
        let gate_in = gate_input(x, pooled, s);

        let global = ffn_forward(self.global(), None, x);
        let mut y = global.out.clone();

        let mut gate = None;
        let mut routed = Vec::new();
        if self.routed_enabled() {
            let decision = route(
                &slot.router,
                &gate_in,
                self.config().top_k,
                control.noise,
                control.selection,
            )?;
            for &i in &decision.selected {
                let t = ffn_forward(&self.routed()[i], None, x);
                axpy(&mut y, decision.weights[i], &t.out);
                routed.push((i, t));
            }
            gate = Some(decision);
        }

        let (loras, mix) = match &slot.expert {
            TaskExpert::Lora(l) => (vec![(l, 1.0)], None),
            TaskExpert::Composed(c) => {
                let w = softmax(&c.mixer.forward(&gate_in))?;
                (vec![(&c.experts[0], w[0]), (&c.experts[1], w[1])], Some(w))
            }
        };
        let mut task_terms = Vec::with_capacity(loras.len());
        let mut specific = vec![0.0; y.len()];
        for (lora, weight) in loras {
            let trace = ffn_forward(self.global(), Some(lora), x);
            for ((sp, o), g) in specific.iter_mut().zip(&trace.out).zip(&global.out) {
                *sp += weight * (o - g);
            }
            task_terms.push(TaskTerm { trace, weight });
        }
        axpy(&mut y, 1.0, &specific);

        Ok((
            y,
            MoeCache {
                version: self.version(),
                task: task_index,
                gate_in,
                gate,
                global,
                routed,
                task_terms,
                mix,
            },
        ))
    }

    /// The three additive terms of the layer output, evaluated separately.
    pub fn moe_terms(
        &self,
        task_index: usize,
        x: &[f64],
        pooled: &[f64],
        s: &StructureFeatures,
        control: GateControl<'_>,
    ) -> Result<[Vec<f64>; 3]> {
        let (_, cache) = self.moe_forward_with(task_index, x, pooled, s, control)?;
        let d = x.len();
        let mut routed = vec![0.0; d];
        if let Some(g) = &cache.gate {
            for (i, t) in &cache.routed {
                axpy(&mut routed, g.weights[*i], &t.out);
            }
        }
        let mut specific = vec![0.0; d];
        for term in &cache.task_terms {
            for ((sp, o), g) in specific.iter_mut().zip(&term.trace.out).zip(&cache.global.out) {
                *sp += term.weight * (o - g);
            }
        }
        Ok([cache.global.out, routed, specific])
    }

    pub fn moe_backward(&self, cache: &MoeCache, upstream: &[f64]) -> Result<MoeGrads> {
        let mut params = self.zeros_like();
        let d = self.config().d_model;
        let mut dx = vec![0.0; d];
        let mut dpooled = vec![0.0; d];
        self.moe_backward_into(cache, upstream, &mut params, &mut dx, &mut dpooled)?;
        Ok(MoeGrads { params, dx, dpooled })
    }

    /// Accumulates gradients into `grads` (same layout as `self`), `dx` and
    /// `dpooled`. The top-K selection is treated as fixed.
    pub fn moe_backward_into(
        &self,
        cache: &MoeCache,
        upstream: &[f64],
        grads: &mut UnifiedModel,
        dx: &mut [f64],
        dpooled: &mut [f64],
    ) -> Result<()> {
        if cache.version != self.version() {
            return Err(Error::InvalidState(format!(
                "cache from parameter version {} used with version {}",
                cache.version,
                self.version()
            )));
        }
        let d = self.config().d_model;
        if upstream.len() != d {
            return Err(crate::error::invalid("upstream gradient has the wrong width"));
        }
        let slot = &self.tasks().slots()[cache.task];
        let mut d_gate_in = vec![0.0; cache.gate_in.len()];

        // Routed experts and their router.
        if let Some(gate) = &cache.gate {
            let mut dp = vec![0.0; gate.probabilities.len()];
            for (i, trace) in &cache.routed {
                dp[*i] = dot(upstream, &trace.out);
                let w = gate.weights[*i];
                let scaled: Vec<f64> = upstream.iter().map(|g| g * w).collect();
                ffn_backward(&self.routed()[*i], None, trace, &scaled, &mut grads.routed_mut()[*i], None, dx);
            }
            let dlogits = softmax_backward(&gate.probabilities, &dp);
            let g_slot = grads.slot_at_mut(cache.task);
            axpy(&mut d_gate_in, 1.0, &slot.router.backward(&cache.gate_in, &dlogits, &mut g_slot.router));
        }

        // Task expert and the global expert.
        let total_w: f64 = cache.task_terms.iter().map(|t| t.weight).sum();
        let global_coef = 1.0 - total_w;
        if global_coef != 0.0 {
            let scaled: Vec<f64> = upstream.iter().map(|g| g * global_coef).collect();
            ffn_backward(self.global(), None, &cache.global, &scaled, grads.global_mut(), None, dx);
        }
        let loras: Vec<_> = slot.expert.loras();
        let mut dmix = Vec::new();
        for (k, (lora, term)) in loras.iter().zip(&cache.task_terms).enumerate() {
            let scaled: Vec<f64> = upstream.iter().map(|g| g * term.weight).collect();
            let (g_global, g_lora) = grads.global_and_lora_mut(cache.task, k);
            ffn_backward(self.global(), Some(lora), &term.trace, &scaled, g_global, Some(g_lora), dx);
            if cache.mix.is_some() {
                let diff: f64 = upstream
                    .iter()
                    .zip(term.trace.out.iter().zip(&cache.global.out))
                    .map(|(g, (o, b))| g * (o - b))
                    .sum();
                dmix.push(diff);
            }
        }
        if let (Some(mix), TaskExpert::Composed(c)) = (&cache.mix, &slot.expert) {
            let dlogits = softmax_backward(mix, &dmix);
            let g_slot = grads.slot_at_mut(cache.task);
            let TaskExpert::Composed(gc) = &mut g_slot.expert else {
                return Err(Error::InvalidState("gradient layout does not match model".into()));
            };
            axpy(&mut d_gate_in, 1.0, &c.mixer.backward(&cache.gate_in, &dlogits, &mut gc.mixer));
        }

        axpy(dx, 1.0, &d_gate_in[..d]);
        axpy(dpooled, 1.0, &d_gate_in[d..2 * d]);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Parameters;
    use crate::testutil::{small_model, token};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-6;

    fn objective(y: &[f64], c: &[f64]) -> f64 {
        dot(y, c) + 0.5 * dot(y, y)
    }

    fn check_fd(model: &UnifiedModel, task: usize) {
        let (x, pooled, s) = token(6, 11);
        let c: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let noise = vec![0.4, -0.9, 0.2];
        let (y, cache) = model
            .moe_forward_with(task, &x, &pooled, &s, GateControl { noise: Some(&noise), selection: None })
            .unwrap();
        let sel = cache.gate.as_ref().unwrap().selected.clone();
        let control = GateControl { noise: Some(&noise), selection: Some(&sel) };
        let upstream: Vec<f64> = y.iter().zip(&c).map(|(y, c)| y + c).collect();
        let grads = model.moe_backward(&cache, &upstream).unwrap();

        let f = |m: &UnifiedModel, x: &[f64], p: &[f64]| {
            objective(&m.moe_forward_with(task, x, p, &s, control).unwrap().0, &c)
        };
        let theta = model.flatten();
        let analytic = grads.params.flatten();
        let names = model.flat_names();
        let mut probe = model.clone();
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] += H;
            probe.assign_flat(&t);
            let up = f(&probe, &x, &pooled);
            t[i] -= 2.0 * H;
            probe.assign_flat(&t);
            let down = f(&probe, &x, &pooled);
            let num = (up - down) / (2.0 * H);
            let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-3);
            assert!(err < 1e-5, "{}: numeric {num} analytic {}", names[i], analytic[i]);
            worst = worst.max(err);
        }
        for i in 0..6 {
            let mut xp = x.clone();
            xp[i] += H;
            let mut xm = x.clone();
            xm[i] -= H;
            let num = (f(model, &xp, &pooled) - f(model, &xm, &pooled)) / (2.0 * H);
            assert!((num - grads.dx[i]).abs() < 1e-6 * (1.0 + num.abs()), "dx[{i}]");
            let mut pp = pooled.clone();
            pp[i] += H;
            let mut pm = pooled.clone();
            pm[i] -= H;
            let num = (f(model, &x, &pp) - f(model, &x, &pm)) / (2.0 * H);
            assert!((num - grads.dpooled[i]).abs() < 1e-6 * (1.0 + num.abs()), "dpooled[{i}]");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_fd(&small_model(2, 5), 1);
    }

    #[test]
    fn composed_gradients_match_finite_differences() {
        let mut m = small_model(2, 6);
        m.compose_task_slot(&"t0".into(), &"t1".into(), "t01".into()).unwrap();
        // Move the mixer off the symmetric point so its gradient is exercised.
        let slot = m.slot_mut(&"t01".into()).unwrap();
        if let TaskExpert::Composed(c) = &mut slot.expert {
            c.mixer.bias[0] = 0.4;
            c.mixer.weight.data_mut()[3] = 0.3;
        }
        check_fd(&m, 2);
    }

    #[test]
    fn output_is_sum_of_terms() {
        let m = small_model(2, 7);
        let (x, pooled, s) = token(6, 2);
        let control = GateControl::default();
        let (y, _) = m.moe_forward_with(0, &x, &pooled, &s, control).unwrap();
        let [a, b, c] = m.moe_terms(0, &x, &pooled, &s, control).unwrap();
        for i in 0..6 {
            assert!((y[i] - (a[i] + b[i] + c[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn disabled_routing_drops_routed_term() {
        let mut m = small_model(2, 7);
        m.set_routed_enabled(false);
        let (x, pooled, s) = token(6, 2);
        let [_, routed, _] = m.moe_terms(0, &x, &pooled, &s, GateControl::default()).unwrap();
        assert!(routed.iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = m.moe_forward(&"t0".into(), &x, &pooled, &s, &mut rng, true).unwrap();
        assert!(cache.gate.is_none());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = small_model(2, 8);
        let (x, pooled, s) = token(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, cache) = m.moe_forward(&"t1".into(), &x, &pooled, &s, &mut rng, true).unwrap();
        let g = m.moe_backward(&cache, &[0.0; 6]).unwrap();
        assert!(g.params.flatten().iter().all(|&v| v == 0.0));
        assert!(g.dx.iter().chain(&g.dpooled).all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = small_model(2, 9);
        let (x, pooled, s) = token(6, 4);
        let (_, cache) = m.moe_forward_with(0, &x, &pooled, &s, GateControl::default()).unwrap();
        m.global_mut().b2[0] += 1.0;
        assert!(matches!(m.moe_backward(&cache, &[1.0; 6]), Err(Error::InvalidState(_))));
    }

    #[test]
    fn noise_only_when_training() {
        let m = small_model(2, 10);
        let (x, pooled, s) = token(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, eval) = m.moe_forward(&"t0".into(), &x, &pooled, &s, &mut rng, false).unwrap();
        assert!(eval.gate.unwrap().noise.iter().all(|&v| v == 0.0));
        let (_, train) = m.moe_forward(&"t0".into(), &x, &pooled, &s, &mut rng, true).unwrap();
        assert!(train.gate.unwrap().noise.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn selected_weights_are_unrenormalized_probabilities() {
        let m = small_model(2, 12);
        let (x, pooled, s) = token(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = m.gate(&"t1".into(), &x, &pooled, &s, &mut rng, false).unwrap();
        assert_eq!(g.selected.len(), 2);
        for i in 0..3 {
            let expect = if g.selected.contains(&i) { g.probabilities[i] } else { 0.0 };
            assert_eq!(g.weights[i], expect);
        }
        assert!(g.weights.iter().sum::<f64>() < 1.0);
    }

    #[test]
    fn clone_is_deep_and_identical() {
        let mut m = small_model(2, 13);
        m.clone_task_slot(&"t0".into(), "t0b".into()).unwrap();
        let (x, pooled, s) = token(6, 7);
        let c = GateControl::default();
        let a = m.moe_forward_with(0, &x, &pooled, &s, c).unwrap().0;
        let b = m.moe_forward_with(2, &x, &pooled, &s, c).unwrap().0;
        assert_eq!(a, b);
        m.slot_mut(&"t0b".into()).unwrap().router.bias[1] += 3.0;
        let a2 = m.moe_forward_with(0, &x, &pooled, &s, c).unwrap().0;
        assert_eq!(a, a2);
        assert!(m.clone_task_slot(&"t0".into(), "t1".into()).is_err());
        assert!(m.clone_task_slot(&"nope".into(), "x".into()).is_err());
    }

    #[test]
    fn composition_starts_as_even_blend() {
        let mut m = small_model(2, 14);
        m.compose_task_slot(&"t0".into(), &"t1".into(), "mix".into()).unwrap();
        let (x, pooled, s) = token(6, 8);
        let c = GateControl::default();
        let [_, _, sp0] = m.moe_terms(0, &x, &pooled, &s, c).unwrap();
        let [_, _, sp1] = m.moe_terms(1, &x, &pooled, &s, c).unwrap();
        let [_, _, mix] = m.moe_terms(2, &x, &pooled, &s, c).unwrap();
        for i in 0..6 {
            assert!((mix[i] - 0.5 * (sp0[i] + sp1[i])).abs() < 1e-12);
        }
        assert!(m.compose_task_slot(&"t0".into(), &"mix".into(), "bad".into()).is_err());
        assert!(m.compose_task_slot(&"t0".into(), &"zz".into(), "bad".into()).is_err());
    }
}
