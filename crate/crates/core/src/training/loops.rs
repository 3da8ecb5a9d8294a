use log::{debug, info, warn};

use super::agent::Agent;
use super::buffer::ReplayBuffer;
use super::config::{Algorithm, TrainLoopConfig};
use crate::critics::{Batch, CriticReport};
use crate::env::{mc_returns_for, PointMazeSpec};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::Real;

pub const METRICS_HEADER: &str =
    "step,episodes,success_rate,mean_return,critic_loss,conservative_term,distill_loss,mean_q,cache_hit_rate";

/// One evaluation point. Loss columns average every update since the previous row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Online environment steps so far.
    pub step: u64,
    pub episodes: u64,
    pub success_rate: Real,
    pub mean_return: Real,
    pub critic_loss: Real,
    pub conservative_term: Real,
    pub distill_loss: Real,
    pub mean_q: Real,
    pub cache_hit_rate: Real,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episodes,
            self.success_rate,
            self.mean_return,
            self.critic_loss,
            self.conservative_term,
            self.distill_loss,
            self.mean_q,
            self.cache_hit_rate
        )
    }
}

/// Running means of critic reports and distillation losses.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainStats {
    critic_loss: Real,
    conservative_term: Real,
    mean_q: Real,
    updates: u64,
    distill_loss: Real,
    distills: u64,
}

impl TrainStats {
    pub fn add(&mut self, r: &CriticReport) {
        self.critic_loss += r.loss;
        self.conservative_term += r.conservative_term;
        self.mean_q += r.mean_q;
        self.updates += 1;
    }

    pub fn add_distill(&mut self, loss: Real) {
        self.distill_loss += loss;
        self.distills += 1;
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn row(&mut self, agent: &Agent, step: u64, episodes: u64, success_rate: Real, mean_return: Real) -> MetricsRow {
        let n = self.updates.max(1) as Real;
        let row = MetricsRow {
            step,
            episodes,
            success_rate,
            mean_return,
            critic_loss: self.critic_loss / n,
            conservative_term: self.conservative_term / n,
            distill_loss: self.distill_loss / self.distills.max(1) as Real,
            mean_q: self.mean_q / n,
            cache_hit_rate: agent.cache.hit_rate(),
        };
        *self = TrainStats::default();
        row
    }
}

fn batch_from(buffer: &ReplayBuffer, n: usize, seed: u64, tags: &[u64]) -> Batch {
    let mut rng = stream(seed, tags);
    Batch::from_transitions(buffer.sample(n, &mut rng))
}

/// Behavior cloning followed by critic pretraining with periodic distillation. The hybrid
/// algorithm keeps its critic untrained here.
pub fn pretrain_offline(agent: &mut Agent, buffer: &ReplayBuffer, train: &TrainLoopConfig) -> Result<TrainStats> {
    let bc = agent.pretrain_bc(&buffer.offline, train.bc_steps, train.batch_size, train.bc_lr)?;
    info!("behavior cloning done after {} steps, loss {bc:.4}", train.bc_steps);
    let mut stats = TrainStats::default();
    if agent.spec.algorithm == Algorithm::HybridParl {
        return Ok(stats);
    }
    for step in 0..train.offline_grad_steps {
        let batch = batch_from(buffer, train.batch_size, agent.seed, &[tag::CRITIC, 0, step as u64]);
        let report = agent.critic_update(&batch)?;
        stats.add(&report);
        if train.distill_every_steps > 0 && (step + 1) % train.distill_every_steps == 0 {
            stats.add_distill(agent.improve_policy(buffer, train)?);
        }
        if (step + 1) % 500 == 0 {
            debug!("offline step {}: critic loss {:.4}, mean q {:.3}", step + 1, report.loss, report.mean_q);
        }
    }
    Ok(stats)
}

/// Online fine-tuning. Emits the offline evaluation point first, then one row every
/// `eval_every` episodes and after the last one; `sink` sees every row with the agent state
/// it describes.
pub fn finetune_online(
    agent: &mut Agent,
    env: &PointMazeSpec,
    buffer: &mut ReplayBuffer,
    train: &TrainLoopConfig,
    mut stats: TrainStats,
    sink: &mut dyn FnMut(&MetricsRow, &Agent) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    train.validate()?;
    let act_selection = agent.action_opt.selection;
    let eval_selection = train.eval_selection.unwrap_or(act_selection);
    let utd = train.utd();
    let mut rows = Vec::new();
    let mut env_steps = 0u64;
    let mut round = 0u64;
    let (sr, ret) = agent.evaluate(env, train.eval_episodes, round, eval_selection)?;
    let row = stats.row(agent, 0, 0, sr, ret);
    info!("offline evaluation: success {sr:.3}");
    sink(&row, agent)?;
    rows.push(row);
    for ep in 0..train.online_env_episodes {
        let mut rng = stream(agent.seed, &[tag::ROLLOUT, ep as u64]);
        let mut episode = match agent.rollout(env, act_selection, &mut rng) {
            Ok((t, _, _)) => t,
            Err(Error::Domain(msg)) => {
                warn!("episode {ep} discarded: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        mc_returns_for(&mut episode, agent.discount());
        let n = episode.len();
        env_steps += n as u64;
        for t in episode {
            buffer.push(t);
        }
        for _ in 0..utd * n {
            let batch = batch_from(buffer, train.batch_size, agent.seed, &[tag::CRITIC, 2, agent.critic_updates]);
            let report = agent.critic_update(&batch)?;
            stats.add(&report);
        }
        let done = ep + 1;
        if done > train.warmup_episodes && (done - train.warmup_episodes) % train.distill_every_episodes == 0 {
            stats.add_distill(agent.improve_policy(buffer, train)?);
        }
        if done % train.eval_every == 0 || done == train.online_env_episodes {
            round += 1;
            let (sr, ret) = agent.evaluate(env, train.eval_episodes, round, eval_selection)?;
            let row = stats.row(agent, env_steps, done as u64, sr, ret);
            info!("episode {done}: success {sr:.3}, critic loss {:.4}", row.critic_loss);
            sink(&row, agent)?;
            rows.push(row);
        }
    }
    Ok(rows)
}
