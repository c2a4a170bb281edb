use crate::error::{config, Result};
use crate::lifecycle::rank::{allocate_ranks, lora_from_residual, RankPolicy};
use crate::lifecycle::registry::{Provenance, TaskExpert, TaskRegistry, TaskSlot};
use crate::lifecycle::unified::{UnifiedModel, FRESH_INIT_STD};
use crate::lifecycle::{consensus_init, StageOneBundle};
use crate::moe::{ExpertFfn, LoraExpert, MoeConfig, Router};

/// Builds the Stage-II model from isolated Stage-I task models.
///
/// The global expert is the consensus average; each task expert is the
/// truncated SVD of that task's residual at its allocated rank, plus the exact
/// bias residual. Routed experts and routers are freshly drawn from
/// `cfg.seed`.
pub fn assemble_unified(bundle: &StageOneBundle, policy: &RankPolicy, cfg: &MoeConfig) -> Result<UnifiedModel> {
    cfg.validate()?;
    bundle.validate()?;
    if bundle.d_model() != cfg.d_model || bundle.d_inner() != cfg.d_inner {
        return Err(config(format!(
            "bundle is d_model = {}, d_inner = {} but config says {}, {}",
            bundle.d_model(),
            bundle.d_inner(),
            cfg.d_model,
            cfg.d_inner
        )));
    }
    let global = consensus_init(bundle)?;
    let ranks = allocate_ranks(bundle, &global, policy)?;

    let mut rng = UnifiedModel::init_rng(cfg.seed);
    let routed: Vec<ExpertFfn> = (0..cfg.num_experts)
        .map(|_| ExpertFfn::random(cfg.d_model, cfg.routed_hidden(), FRESH_INIT_STD, &mut rng))
        .collect();

    let mut tasks = TaskRegistry::new();
    for (task, [r1, r2]) in bundle.tasks.iter().zip(ranks) {
        let f = &task.model.ffn;
        let expert = LoraExpert {
            layer1: lora_from_residual(&f.w1, &global.w1, r1)?,
            layer2: lora_from_residual(&f.w2, &global.w2, r2)?,
            bias1: f.b1.iter().zip(&global.b1).map(|(a, b)| a - b).collect(),
            bias2: f.b2.iter().zip(&global.b2).map(|(a, b)| a - b).collect(),
        };
        tasks.insert(TaskSlot {
            id: task.id.clone(),
            router: Router::random(cfg.num_experts, cfg.gate_dim(), FRESH_INIT_STD, &mut rng),
            expert: TaskExpert::Lora(expert),
            projection: task.model.projection.clone(),
            provenance: Provenance::Trained,
        })?;
    }
    UnifiedModel::from_parts(cfg.clone(), global, routed, true, tasks)
}
