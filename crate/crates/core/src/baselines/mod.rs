//! Comparison optimizers, ablation arms and the over-estimation diagnostic.

mod arms;
mod cem;
mod probe;
mod sil;

pub use arms::{ablation_config, Ablation, Arm};
pub use cem::{cem_optimize, CemConfig, CemInit, CemResult, CEM_STD_FLOOR};
pub use probe::{action_stats_probe, overestimation_probe, ActionStatsRecord, OverestimationRecord, ProbeSource};
pub use sil::{advantages, sil_distill, sil_weights, SilConfig, SilWeighting};
