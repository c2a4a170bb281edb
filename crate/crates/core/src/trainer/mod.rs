//! Synthetic multi-task benchmark and the two-stage training loops.

mod gradcheck;
mod interference;
mod sequence;
mod stage1;
mod stage2;
mod suite;

pub use gradcheck::{
    analytic_gradient, compare_gradients, freeze_gate, grad_check, numeric_gradient, relative_error, GradCheckReport,
    FD_STEP, REL_FLOOR,
};
pub use interference::{interference_report, InterferenceConfig, InterferenceReport};
pub use sequence::{dense_loss, dense_loss_grad, sse, unified_loss, FrozenGate, SequenceCache};
pub use stage1::{dense_init, gradient_conflict, stage1_train, train_dense, TrainConfig, DIVERGENCE_LOSS};
pub use stage2::{stage2_train, TrainReport};
pub use suite::{
    grid_positions, landmark_layout, make_synthetic_suite, random_tokens, Sample, SuiteConfig, SyntheticSuite,
    TaskData,
};
