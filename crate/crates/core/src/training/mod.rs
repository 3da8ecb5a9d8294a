//! Offline pretraining, online fine-tuning, distillation and evaluation.

mod agent;
mod buffer;
mod cache;
mod config;
mod distill;
mod loops;

pub use agent::{ActionSource, Agent, AgentSpec, PolicyUpdate};
pub use buffer::ReplayBuffer;
pub use cache::{state_hash, ActionCache};
pub use config::{Algorithm, CriticConfig, HeadKind, TrainLoopConfig};
pub use distill::{build_distill_dataset, distill_dataset_from_sets, distill_policy, OptimizedActionDataset};
pub use loops::{finetune_online, pretrain_offline, MetricsRow, TrainStats, METRICS_HEADER};
