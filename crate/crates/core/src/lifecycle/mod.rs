//! Stage-I to Stage-II transition: consensus initialization, residual rank
//! allocation, task-expert fitting, and task slot cloning / composition.

mod assemble;
mod bundle;
pub mod rank;
mod registry;
mod unified;

pub use assemble::assemble_unified;
pub use bundle::{consensus_init, DenseTaskModel, DenseTrace, StageOneBundle, StageOneMeta, StageOneTask};
pub use rank::{
    allocate_by_norms, allocate_ranks, energy_rank, gradient_rank_baseline, lora_from_residual, residual_rank,
    RankMode, RankPolicy,
};
pub use registry::{ComposedExpert, Provenance, TaskExpert, TaskId, TaskRegistry, TaskSlot};
pub use unified::{UnifiedModel, FRESH_INIT_STD};
