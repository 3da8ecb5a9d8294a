use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cem::{CemConfig, CemInit};
use crate::action_opt::{local_optimize_batch, rank_candidates, ActionCandidateSet, ActionOptConfig, Selection};
use crate::critics::QFunction;
use crate::env::PointMazeSpec;
use crate::error::Result;
use crate::rng::{stream, tag};
use crate::training::{ActionSource, Agent};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    Cem,
    Parl,
    BasePolicy,
}

impl ProbeSource {
    pub fn name(self) -> &'static str {
        match self {
            ProbeSource::Cem => "cem",
            ProbeSource::Parl => "parl",
            ProbeSource::BasePolicy => "base_policy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverestimationRecord {
    pub step: u64,
    pub q_predicted: Real,
    pub mc_return: Real,
    pub gap: Real,
}

impl OverestimationRecord {
    pub fn new(step: u64, q_predicted: Real, mc_return: Real) -> Self {
        OverestimationRecord { step, q_predicted, mc_return, gap: q_predicted - mc_return }
    }
}

/// Rolls out `n_rollouts` episodes acting through `source` and compares the critic's value
/// of the first state-action pair with the realized discounted return (rewards include the
/// agent's reward bias). `step` is the agent's critic update count.
pub fn overestimation_probe(
    agent: &Agent,
    source: ProbeSource,
    cem: &CemConfig,
    env: &PointMazeSpec,
    n_rollouts: usize,
    selection: Selection,
) -> Result<Vec<OverestimationRecord>> {
    let actor = match source {
        ProbeSource::Cem => ActionSource::Cem(CemConfig { init: CemInit::UniformRandom, ..cem.clone() }),
        ProbeSource::Parl => ActionSource::Parl,
        ProbeSource::BasePolicy => ActionSource::Raw,
    };
    let gamma = agent.discount();
    (0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(agent.seed, &[tag::PROBE, source as u64, i as u64]);
            let (episode, _, _) = agent.rollout_with(&actor, env, selection, &mut rng)?;
            let first = &episode[0];
            let q = agent.critic.online().q_at(&first.state, &first.action)?[0];
            let mc = episode.iter().rev().fold(0.0, |acc, t| t.reward + gamma * acc);
            Ok(OverestimationRecord::new(agent.critic_updates, q, mc))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionStatsRecord {
    pub state_index: usize,
    /// Mean per-dimension std of the candidates before and after the gradient steps.
    pub std_before: Real,
    pub std_after: Real,
    /// Mean L1 norm of each candidate's displacement.
    pub l1_change: Real,
}

fn spread(actions: &[Real], d: usize) -> Real {
    let n = (actions.len() / d) as Real;
    (0..d)
        .map(|j| {
            let col: Vec<Real> = actions.iter().skip(j).step_by(d).copied().collect();
            let m = col.iter().sum::<Real>() / n;
            (col.iter().map(|v| (v - m).powi(2)).sum::<Real>() / n).sqrt()
        })
        .sum::<Real>()
        / d as Real
}

/// Candidate spread before and after local optimization at each state.
pub fn action_stats_probe<Q: QFunction + ?Sized>(
    agent: &Agent,
    critic: &Q,
    states: &[Real],
    config: &ActionOptConfig,
) -> Result<Vec<ActionStatsRecord>> {
    let ds = critic.d_state();
    let d = critic.d_action();
    states
        .chunks(ds)
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream(agent.seed, &[tag::PROBE, 100, i as u64]);
            let samples = agent.policy.sample(s, config.n_samples, &mut rng)?;
            let set = rank_candidates(critic, s, &samples, None, config.top_m)?;
            // singleton sets keep each candidate paired with its start point
            let mut singles: Vec<ActionCandidateSet> = (0..set.len())
                .map(|c| ActionCandidateSet {
                    state: set.state.clone(),
                    actions: set.action(c).to_vec(),
                    q_values: vec![set.q_values[c]],
                    provenance: vec![set.provenance[c]],
                    d_action: d,
                })
                .collect();
            local_optimize_batch(critic, &mut singles, config, None)?;
            let after: Vec<Real> = singles.iter().flat_map(|c| c.actions.iter().copied()).collect();
            let l1 = set
                .actions
                .iter()
                .zip(&after)
                .map(|(a, b)| (a - b).abs())
                .sum::<Real>()
                / set.len() as Real;
            Ok(ActionStatsRecord {
                state_index: i,
                std_before: spread(&set.actions, d),
                std_after: spread(&after, d),
                l1_change: l1,
            })
        })
        .collect()
}
