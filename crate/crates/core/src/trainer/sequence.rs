//! Whole-sequence passes: task projection, pooling, landmark features and the
//! expert layer per token, plus the mean-squared-error objective.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::lifecycle::{DenseTaskModel, UnifiedModel};
use crate::moe::{pool_sequence, structure_features, GateControl, MoeCache, StructureFeatures};
use crate::trainer::suite::Sample;

/// Noise realizations and selections of one sequence, token by token.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenGate {
    pub noise: Vec<Option<Vec<f64>>>,
    pub selection: Vec<Option<Vec<usize>>>,
}

#[derive(Debug, Clone)]
pub struct SequenceCache {
    tokens: Vec<MoeCache>,
}

impl SequenceCache {
    pub fn token_caches(&self) -> &[MoeCache] {
        &self.tokens
    }

    pub fn frozen_gate(&self) -> FrozenGate {
        let gates = self.tokens.iter().map(|c| c.gate.as_ref());
        FrozenGate {
            noise: gates.clone().map(|g| g.map(|g| g.noise.clone())).collect(),
            selection: gates.map(|g| g.map(|g| g.selected.clone())).collect(),
        }
    }
}

/// Sum of squared errors over all tokens and channels, and its gradient.
pub fn sse(outputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if outputs.len() != targets.len() {
        return Err(invalid("output and target sequences differ in length"));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(outputs.len());
    for (y, t) in outputs.iter().zip(targets) {
        if y.len() != t.len() {
            return Err(invalid("output and target widths differ"));
        }
        let g: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
        loss += g.iter().map(|v| v * v).sum::<f64>();
        grad.push(g.into_iter().map(|v| 2.0 * v).collect());
    }
    Ok((loss, grad))
}

/// Number of scalar outputs in a sample; MSE divides by it.
pub(crate) fn sample_size(sample: &Sample) -> usize {
    sample.targets.iter().map(Vec::len).sum()
}

fn features(model: &UnifiedModel, sample: &Sample) -> Result<Vec<StructureFeatures>> {
    if sample.positions.len() != sample.tokens.len() {
        return Err(invalid("one position per token is required"));
    }
    sample
        .positions
        .iter()
        .map(|&p| structure_features(&sample.landmarks, p, model.config().num_landmarks))
        .collect()
}

impl UnifiedModel {
    /// Forward over a sequence with per-token noise supplied by `noise_for`.
    fn sequence_forward_inner(
        &self,
        task_index: usize,
        sample: &Sample,
        frozen: Option<&FrozenGate>,
        mut noise_for: impl FnMut(&Self) -> Option<Vec<f64>>,
    ) -> Result<(Vec<Vec<f64>>, SequenceCache)> {
        let slot = self
            .tasks()
            .slots()
            .get(task_index)
            .ok_or_else(|| crate::Error::UnknownTask(format!("#{task_index}")))?;
        if let Some(f) = frozen {
            if f.noise.len() != sample.tokens.len() || f.selection.len() != sample.tokens.len() {
                return Err(invalid("frozen gate does not match the sequence length"));
            }
        }
        let feats = features(self, sample)?;
        let projected: Vec<Vec<f64>> = sample
            .tokens
            .iter()
            .map(|x| {
                if x.len() != self.config().d_model {
                    return Err(invalid("token width does not match d_model"));
                }
                Ok(slot.projection.forward(x))
            })
            .collect::<Result<_>>()?;
        let pooled = pool_sequence(&projected)?;
        let mut outputs = Vec::with_capacity(projected.len());
        let mut tokens = Vec::with_capacity(projected.len());
        for (t, (z, s)) in projected.iter().zip(&feats).enumerate() {
            let drawn;
            let control = match frozen {
                Some(f) => GateControl {
                    noise: f.noise[t].as_deref(),
                    selection: f.selection[t].as_deref(),
                },
                None => {
                    drawn = noise_for(self);
                    GateControl {
                        noise: drawn.as_deref(),
                        selection: None,
                    }
                }
            };
            let (y, cache) = self.moe_forward_with(task_index, z, &pooled, s, control)?;
            outputs.push(y);
            tokens.push(cache);
        }
        Ok((outputs, SequenceCache { tokens }))
    }

    pub fn sequence_forward<R: Rng + ?Sized>(
        &self,
        task_index: usize,
        sample: &Sample,
        rng: &mut R,
        training: bool,
    ) -> Result<(Vec<Vec<f64>>, SequenceCache)> {
        self.sequence_forward_inner(task_index, sample, None, |m| m.draw_noise(rng, training))
    }

    /// Replays a sequence with the noise and selection of an earlier pass.
    pub fn sequence_forward_frozen(
        &self,
        task_index: usize,
        sample: &Sample,
        frozen: &FrozenGate,
    ) -> Result<(Vec<Vec<f64>>, SequenceCache)> {
        self.sequence_forward_inner(task_index, sample, Some(frozen), |_| None)
    }

    /// Accumulates parameter gradients for per-token upstream gradients.
    pub fn sequence_backward_into(
        &self,
        sample: &Sample,
        cache: &SequenceCache,
        dy: &[Vec<f64>],
        grads: &mut UnifiedModel,
    ) -> Result<()> {
        let n = cache.tokens.len();
        if dy.len() != n || n == 0 {
            return Err(invalid("upstream gradient does not match the sequence"));
        }
        let d = self.config().d_model;
        let task = cache.tokens[0].task_index();
        let mut dz = vec![vec![0.0; d]; n];
        let mut dpooled = vec![0.0; d];
        for ((c, g), dzt) in cache.tokens.iter().zip(dy).zip(dz.iter_mut()) {
            self.moe_backward_into(c, g, grads, dzt, &mut dpooled)?;
        }
        let projection = &self.tasks().slots()[task].projection;
        let g_proj = &mut grads.slot_at_mut(task).projection;
        for (x, dzt) in sample.tokens.iter().zip(dz.iter_mut()) {
            for (a, b) in dzt.iter_mut().zip(&dpooled) {
                *a += b / n as f64;
            }
            projection.backward(x, dzt, g_proj);
        }
        Ok(())
    }
}

/// Mean-squared error of a dense model over a task's samples.
pub fn dense_loss(model: &DenseTaskModel, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let (l, _) = sse(&model.forward(&s.tokens), &s.targets)?;
        total += l / sample_size(s) as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Loss and full-batch gradient of a dense model, accumulated into `grads`
/// scaled by `weight`.
pub fn dense_loss_grad(
    model: &DenseTaskModel,
    samples: &[Sample],
    weight: f64,
    grads: &mut DenseTaskModel,
) -> Result<f64> {
    let mut total = 0.0;
    let n = samples.len() as f64;
    for s in samples {
        let (out, trace) = model.forward_traced(&s.tokens);
        let (l, mut dy) = sse(&out, &s.targets)?;
        let scale = weight / (n * sample_size(s) as f64);
        dy.iter_mut().flatten().for_each(|v| *v *= scale);
        model.backward(&s.tokens, &trace, &dy, grads);
        total += l / sample_size(s) as f64;
    }
    Ok(total / n)
}

/// Noise-off mean-squared error of one task of the unified model.
pub fn unified_loss(model: &UnifiedModel, task_index: usize, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let (out, _) = model.sequence_forward_inner(task_index, s, None, |_| None)?;
        total += sse(&out, &s.targets)?.0 / sample_size(s) as f64;
    }
    Ok(total / samples.len() as f64)
}
