//! Meta-model training: distillation from recovered tasks, regularized
//! multi-teacher updates, a replay bank and MAML episodes.

pub mod bank;
pub mod igr;
pub mod kd;
pub mod maml;
pub mod train;

pub use bank::{replay_episode_from_bank, MemoryBank};
pub use igr::{explicit_regularizer, igr_update_gradient, task_gradients, FnLoss, GradientSpread, IgrOutput, TaskEval, TaskLoss};
pub use kd::{kd_loss_var, slice_logits, teacher_targets};
pub use maml::{adapt, maml_outer_grad, maml_step, MamlOutput, MetaState};
pub use train::{
    train, Diagnostics, DiagnosticsRow, EpochLog, EpochReport, KdTask, LiveRecovery, TaskCache, TaskSource, TrainConfig,
    TrainOutcome,
};
