use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::lifecycle::registry::{
    ComposedExpert, Provenance, TaskExpert, TaskId, TaskRegistry, TaskSlot,
};
use crate::moe::{ExpertFfn, LoraExpert, MoeConfig, Router};
use crate::params::Parameters;

/// Standard deviation for freshly initialized routers and routed experts.
pub const FRESH_INIT_STD: f64 = 0.02;

/// Stage-II model: global expert, routed expert pool and per-task slots.
#[derive(Debug, Clone)]
pub struct UnifiedModel {
    config: MoeConfig,
    global: ExpertFfn,
    routed: Vec<ExpertFfn>,
    routed_enabled: bool,
    tasks: TaskRegistry,
    version: u64,
}

impl PartialEq for UnifiedModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.global == other.global
            && self.routed == other.routed
            && self.routed_enabled == other.routed_enabled
            && self.tasks == other.tasks
    }
}

impl UnifiedModel {
    pub fn from_parts(
        config: MoeConfig,
        global: ExpertFfn,
        routed: Vec<ExpertFfn>,
        routed_enabled: bool,
        tasks: TaskRegistry,
    ) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.d_model, config.d_inner);
        global.check_shape(d, h)?;
        if routed.len() != config.num_experts {
            return Err(crate::error::config(format!(
                "{} routed experts for num_experts = {}",
                routed.len(),
                config.num_experts
            )));
        }
        for r in &routed {
            r.check_shape(d, config.routed_hidden())?;
        }
        for slot in tasks.slots() {
            check_linear(&slot.router, config.num_experts, config.gate_dim(), "router")?;
            check_linear(&slot.projection, d, d, "projection")?;
            for l in slot.expert.loras() {
                l.check_shape(d, h)?;
            }
            if let TaskExpert::Composed(c) = &slot.expert {
                check_linear(&c.mixer, 2, config.gate_dim(), "composition router")?;
            }
        }
        Ok(Self {
            config,
            global,
            routed,
            routed_enabled,
            tasks,
            version: 0,
        })
    }

    pub fn config(&self) -> &MoeConfig {
        &self.config
    }

    pub fn global(&self) -> &ExpertFfn {
        &self.global
    }

    pub fn routed(&self) -> &[ExpertFfn] {
        &self.routed
    }

    pub fn routed_enabled(&self) -> bool {
        self.routed_enabled
    }

    pub fn tasks(&self) -> &TaskRegistry {
        &self.tasks
    }

    /// Bumped on every mutable access; caches from older versions are stale.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn global_mut(&mut self) -> &mut ExpertFfn {
        self.version += 1;
        &mut self.global
    }

    pub fn routed_mut(&mut self) -> &mut [ExpertFfn] {
        self.version += 1;
        &mut self.routed
    }

    pub fn slot_mut(&mut self, id: &TaskId) -> Result<&mut TaskSlot> {
        let idx = self.tasks.index_of(id)?;
        self.version += 1;
        Ok(&mut self.tasks.slots_mut()[idx])
    }

    pub(crate) fn slot_at_mut(&mut self, idx: usize) -> &mut TaskSlot {
        self.version += 1;
        &mut self.tasks.slots_mut()[idx]
    }

    /// Disjoint borrows of the global expert and residual `k` of a task.
    pub(crate) fn global_and_lora_mut(&mut self, task: usize, k: usize) -> (&mut ExpertFfn, &mut LoraExpert) {
        self.version += 1;
        let lora = match &mut self.tasks.slots_mut()[task].expert {
            TaskExpert::Lora(l) => l,
            TaskExpert::Composed(c) => &mut c.experts[k],
        };
        (&mut self.global, lora)
    }

    pub fn set_routed_enabled(&mut self, enabled: bool) {
        self.version += 1;
        self.routed_enabled = enabled;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.config.seed = seed;
    }

    /// Same layout, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    /// Deep-copies every task-specific parameter of `parent` into a new slot.
    pub fn clone_task_slot(&mut self, parent: &TaskId, new: TaskId) -> Result<()> {
        if self.tasks.contains(&new) {
            return Err(invalid(format!("task `{new}` is already registered")));
        }
        let mut slot = self.tasks.get(parent)?.clone();
        slot.id = new;
        slot.provenance = Provenance::ClonedFrom(parent.clone());
        self.version += 1;
        self.tasks.insert(slot)
    }

    /// Creates a compositional task from two parents' experts plus a fresh
    /// zero-initialized 2-way composition router (an even blend at start).
    ///
    /// The gating router and the projection are copied from `parent_a`.
    pub fn compose_task_slot(&mut self, parent_a: &TaskId, parent_b: &TaskId, new: TaskId) -> Result<()> {
        if self.tasks.contains(&new) {
            return Err(invalid(format!("task `{new}` is already registered")));
        }
        let a = self.tasks.get(parent_a).map_err(|_| invalid(format!("missing parent `{parent_a}`")))?;
        let b = self.tasks.get(parent_b).map_err(|_| invalid(format!("missing parent `{parent_b}`")))?;
        let expert_a = primary_lora(&a.expert, parent_a)?;
        let expert_b = primary_lora(&b.expert, parent_b)?;
        let slot = TaskSlot {
            id: new,
            router: a.router.clone(),
            projection: a.projection.clone(),
            expert: TaskExpert::Composed(ComposedExpert {
                parents: [parent_a.clone(), parent_b.clone()],
                experts: [expert_a, expert_b],
                mixer: Router::zeros(2, self.config.gate_dim()),
            }),
            provenance: Provenance::ComposedOf(parent_a.clone(), parent_b.clone()),
        };
        self.version += 1;
        self.tasks.insert(slot)
    }

    /// Fresh router / routed-expert RNG derived from the config seed.
    pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b10e_0000_0002)
    }
}

fn primary_lora(expert: &TaskExpert, id: &TaskId) -> Result<LoraExpert> {
    match expert {
        TaskExpert::Lora(l) => Ok(l.clone()),
        TaskExpert::Composed(_) => Err(invalid(format!(
            "task `{id}` is itself composed and cannot be a composition parent"
        ))),
    }
}

fn check_linear(l: &crate::moe::Linear, d_out: usize, d_in: usize, what: &str) -> Result<()> {
    if l.weight.shape() != (d_out, d_in) || l.bias.len() != d_out {
        return Err(crate::error::config(format!(
            "{what} is {:?}, expected ({d_out}, {d_in})",
            l.weight.shape()
        )));
    }
    Ok(())
}

impl Parameters for UnifiedModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.global.visit("global", f);
        for (i, r) in self.routed.iter().enumerate() {
            r.visit(&format!("routed.{i}"), f);
        }
        for slot in self.tasks.slots() {
            let p = format!("task.{}", slot.id);
            slot.router.visit(&format!("{p}.router"), f);
            slot.projection.visit(&format!("{p}.projection"), f);
            match &slot.expert {
                TaskExpert::Lora(l) => l.visit(&format!("{p}.lora"), f),
                TaskExpert::Composed(c) => {
                    c.mixer.visit(&format!("{p}.mixer"), f);
                    c.experts[0].visit(&format!("{p}.lora_a"), f);
                    c.experts[1].visit(&format!("{p}.lora_b"), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.version += 1;
        self.global.visit_mut("global", f);
        for (i, r) in self.routed.iter_mut().enumerate() {
            r.visit_mut(&format!("routed.{i}"), f);
        }
        for slot in self.tasks.slots_mut() {
            let p = format!("task.{}", slot.id);
            slot.router.visit_mut(&format!("{p}.router"), f);
            slot.projection.visit_mut(&format!("{p}.projection"), f);
            match &mut slot.expert {
                TaskExpert::Lora(l) => l.visit_mut(&format!("{p}.lora"), f),
                TaskExpert::Composed(c) => {
                    c.mixer.visit_mut(&format!("{p}.mixer"), f);
                    c.experts[0].visit_mut(&format!("{p}.lora_a"), f);
                    c.experts[1].visit_mut(&format!("{p}.lora_b"), f);
                }
            }
        }
    }
}
