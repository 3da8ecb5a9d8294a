//! Q-ensembles with target networks, a scalar or HL-Gauss head, and the Cal-QL, IQL and
//! hybrid TD losses.

mod ensemble;
mod head;
mod losses;

pub use ensemble::{ClosureQ, CriticEnsemble, CriticHead, EnsembleView, MemberEval, QFunction};
pub use head::{clamped_target_count, HlGaussHead};
pub use losses::{
    calql_loss, iql_losses, td_loss_hybrid, td_targets, BackupMode, Batch, BellmanActions, CalQlConfig,
    CriticOptimizer, CriticReport, ValueNet,
};
