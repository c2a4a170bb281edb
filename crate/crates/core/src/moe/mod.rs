//! The expert layer: global expert, structure-aware routed experts and
//! low-rank task experts.

mod config;
pub mod ffn;
mod layer;
mod linear;
pub mod router;

pub use config::MoeConfig;
pub use ffn::{ExpertFfn, LoraExpert, LoraFactors};
pub use layer::{GateControl, MoeCache, MoeGrads};
pub use linear::{Linear, Router, TaskProjection};
pub use router::{gate_input, pool_sequence, structure_features, GateDecision, StructureFeatures};
