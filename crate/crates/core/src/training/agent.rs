use rayon::prelude::*;
use rand::Rng;

use super::cache::ActionCache;
use super::config::{Algorithm, CriticConfig, HeadKind, TrainLoopConfig};
use super::distill::{distill_dataset_from_sets, distill_policy};
use super::ReplayBuffer;
use crate::action_opt::{optimize_from_samples, optimize_many, optimized_policy, ActionOptConfig, LocalStats, Selection};
use crate::baselines::{cem_optimize, sil_distill, CemConfig, SilConfig};
use crate::critics::{
    calql_loss, iql_losses, td_loss_hybrid, Batch, BellmanActions, CalQlConfig, CriticEnsemble, CriticHead,
    CriticOptimizer, CriticReport, EnsembleView, HlGaussHead, ValueNet,
};
use crate::env::{Dataset, PointMazeSpec, Transition};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Checkpoint, Normalizer};
use crate::Adam;
use crate::policies::{PolicyConfig, PolicyHandle};
use crate::rng::{stream, tag};
use crate::Real;

/// How actions are chosen at a state.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionSource {
    /// Policy samples re-ranked and locally optimized under the critic.
    Parl,
    /// Cross-entropy search under the critic.
    Cem(CemConfig),
    /// A single raw policy sample.
    Raw,
}

/// How the policy is improved after pretraining.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyUpdate {
    Distill,
    SelfImitation(SilConfig),
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub algorithm: Algorithm,
    /// Acting and evaluation.
    pub actor: ActionSource,
    /// Candidate actions inside critic losses.
    pub targets: ActionSource,
    pub update: PolicyUpdate,
}

impl AgentSpec {
    pub fn parl(algorithm: Algorithm) -> Self {
        AgentSpec { algorithm, actor: ActionSource::Parl, targets: ActionSource::Parl, update: PolicyUpdate::Distill }
    }
}

/// Policy, critic and optimizer state for one run.
#[derive(Debug, Clone)]
pub struct Agent {
    pub spec: AgentSpec,
    pub policy: PolicyHandle,
    pub critic: CriticEnsemble,
    pub value: Option<ValueNet>,
    critic_opt: CriticOptimizer,
    policy_opt: Adam,
    pub cache: ActionCache,
    pub action_opt: ActionOptConfig,
    pub calql: CalQlConfig,
    pub bellman_actions: BellmanActions,
    pub reward_bias: Real,
    pub seed: u64,
    pub critic_updates: u64,
    pub distillations: u64,
    /// Policy samples drawn for critic targets and distillation (not for acting).
    pub improvement_samples: u64,
    pub local_stats: LocalStats,
}

fn divergence(what: &str, value: Real, step: u64) -> Error {
    Error::Divergence(format!("{what} is {value} at update {step}"))
}

fn non_finite(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { layer } => Error::Divergence(format!("non-finite gradient in layer {layer} at update {step}")),
        other => other,
    }
}

impl Agent {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: AgentSpec,
        policy_cfg: &PolicyConfig,
        critic_cfg: &CriticConfig,
        action_opt: &ActionOptConfig,
        train: &TrainLoopConfig,
        env: &PointMazeSpec,
        reward_bias: Real,
        seed: u64,
    ) -> Result<Self> {
        action_opt.validate()?;
        critic_cfg.validate()?;
        let (shift, scale) = env.state_normalizer();
        let norm = Normalizer { shift, scale };
        let (ds, da) = (env.d_state(), env.d_action());
        let policy = PolicyHandle::new(policy_cfg, ds, da, norm.clone(), &mut stream(seed, &[tag::INIT, 0]))?;
        let head = match critic_cfg.head {
            HeadKind::Scalar => CriticHead::Scalar,
            HeadKind::HlGauss => CriticHead::HlGauss(HlGaussHead::new(
                critic_cfg.hl_bins,
                critic_cfg.hl_v_min,
                critic_cfg.hl_v_max,
                critic_cfg.hl_sigma_ratio,
            )?),
        };
        let (size, sub) = critic_cfg.ensemble(spec.algorithm);
        let critic = CriticEnsemble::new(
            ds,
            da,
            &critic_cfg.hidden,
            critic_cfg.activation,
            size,
            sub,
            head,
            critic_cfg.polyak_tau,
            norm.clone(),
            &mut stream(seed, &[tag::INIT, 1]),
        )?;
        let value = match spec.algorithm {
            Algorithm::IqlParl => Some(ValueNet::new(
                &critic_cfg.hidden,
                critic_cfg.activation,
                critic_cfg.expectile,
                norm,
                &mut stream(seed, &[tag::INIT, 2]),
            )?),
            _ => None,
        };
        let critic_opt = CriticOptimizer::new(&critic, value.as_ref(), AdamConfig::with_lr(train.critic_lr));
        let policy_opt = Adam::new(policy.net(), AdamConfig::with_lr(train.bc_lr));
        Ok(Agent {
            spec,
            cache: ActionCache::new(action_opt.n_samples, seed),
            policy,
            critic,
            value,
            critic_opt,
            policy_opt,
            action_opt: action_opt.clone(),
            calql: critic_cfg.calql.clone(),
            bellman_actions: critic_cfg.bellman_actions,
            reward_bias,
            seed,
            critic_updates: 0,
            distillations: 0,
            improvement_samples: 0,
            local_stats: LocalStats::default(),
        })
    }

    pub fn discount(&self) -> Real {
        self.calql.discount
    }

    /// Re-creates the critic with fresh weights and optimizer state.
    pub fn reset_critic(&mut self, critic_cfg: &CriticConfig, critic_lr: Real) -> Result<()> {
        let mut rng = stream(self.seed, &[tag::INIT, 3]);
        let members = self.critic.members.len();
        let dims = self.critic.members[0].dims().to_vec();
        let act = self.critic.members[0].activation();
        let fresh: Vec<_> = (0..members).map(|_| crate::Mlp::new(&dims, act, &mut rng)).collect();
        self.critic.targets = fresh.clone();
        self.critic.members = fresh;
        if let Some(v) = self.value.as_mut() {
            *v = ValueNet::new(&critic_cfg.hidden, critic_cfg.activation, v.expectile, v.normalizer.clone(), &mut rng)?;
        }
        self.critic_opt = CriticOptimizer::new(&self.critic, self.value.as_ref(), AdamConfig::with_lr(critic_lr));
        Ok(())
    }

    /// Behavior cloning on dataset actions with uniform minibatches.
    pub fn pretrain_bc(&mut self, dataset: &Dataset, steps: usize, batch_size: usize, lr: Real) -> Result<Real> {
        if steps == 0 {
            return Ok(0.0);
        }
        if dataset.is_empty() {
            return Err(Error::Contract("behavior cloning on an empty dataset".into()));
        }
        self.policy_opt.set_learning_rate(lr);
        let mut rng = stream(self.seed, &[tag::BC]);
        let (mut s, mut a) = (Vec::new(), Vec::new());
        let mut last = 0.0;
        for step in 0..steps {
            s.clear();
            a.clear();
            for _ in 0..batch_size {
                let t = &dataset.transitions[rng.random_range(0..dataset.len())];
                s.extend_from_slice(&t.state);
                a.extend_from_slice(&t.action);
            }
            let (loss, grads) = self.policy.loss_and_grad(&s, &a, None, &mut rng)?;
            if !loss.is_finite() {
                return Err(divergence("behavior cloning loss", loss, step as u64));
            }
            self.policy_opt.step(self.policy.net_mut(), &grads).map_err(|e| non_finite(e, step as u64))?;
            last = loss;
        }
        self.policy.bump_version();
        Ok(last)
    }

    /// Candidate sets at `states` per the target source. PA-RL sets draw their raw samples
    /// from the action cache.
    fn candidate_sets<R: Rng + ?Sized>(
        &mut self,
        states: &[Real],
        dataset_actions: Option<&[Real]>,
        n_with_actions: usize,
        rng: &mut R,
    ) -> Result<Vec<crate::action_opt::ActionCandidateSet>> {
        let ds = self.critic.d_state();
        let view = self.critic.online_subset(rng);
        match &self.spec.targets {
            ActionSource::Parl => {
                let before = self.policy.samples_drawn();
                let samples = self.cache.lookup_many(&self.policy, states, ds)?;
                let cfg = match self.bellman_actions {
                    BellmanActions::Optimized => self.action_opt.clone(),
                    BellmanActions::Base => ActionOptConfig {
                        top_m: self.action_opt.n_samples,
                        n_grad_steps: 0,
                        include_dataset_action: false,
                        ..self.action_opt.clone()
                    },
                };
                let k = n_with_actions;
                let (mut sets, st1) = optimize_many(&view, &states[..k * ds], &samples[..k], dataset_actions, &cfg)?;
                let (rest, st2) = optimize_many(&view, &states[k * ds..], &samples[k..], None, &cfg)?;
                sets.extend(rest);
                self.local_stats.merge(st1);
                self.local_stats.merge(st2);
                self.improvement_samples += self.policy.samples_drawn() - before;
                Ok(sets)
            }
            ActionSource::Cem(cfg) => {
                let idx = self.critic_updates;
                let before = self.policy.samples_drawn();
                let policy = &self.policy;
                let seed = self.seed;
                let sets = states
                    .par_chunks(ds)
                    .enumerate()
                    .map(|(i, s)| {
                        let mut r = stream(seed, &[tag::CEM, idx, i as u64]);
                        Ok(cem_optimize(&view, s, cfg, &mut r, Some(policy))?.elites)
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.improvement_samples += self.policy.samples_drawn() - before;
                Ok(sets)
            }
            ActionSource::Raw => Err(Error::Config("raw policy samples cannot supply critic targets".into())),
        }
    }

    /// One critic (and value) gradient step on `batch`.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<CriticReport> {
        let idx = self.critic_updates;
        self.critic_updates += 1;
        let mut rng = stream(self.seed, &[tag::CRITIC, 1, idx]);
        let report = match self.spec.algorithm {
            Algorithm::IqlParl => {
                let value = self.value.as_ref().ok_or_else(|| Error::Contract("IQL critic without value net".into()))?;
                let (report, value_grads, grads) = iql_losses(&self.critic, value, batch, self.calql.discount, &mut rng)?;
                if !report.loss.is_finite() {
                    return Err(divergence("critic loss", report.loss, idx));
                }
                let value = self.value.as_mut().expect("checked above");
                self.critic_opt.apply_value(value, &value_grads).map_err(|e| non_finite(e, idx))?;
                self.critic_opt.apply(&mut self.critic, &grads).map_err(|e| non_finite(e, idx))?;
                report
            }
            Algorithm::CalqlParl => {
                let n = batch.len();
                let mut states = batch.states.clone();
                states.extend_from_slice(&batch.next_states);
                let sets = self.candidate_sets(&states, Some(&batch.actions), n, &mut rng)?;
                let (cur, next) = sets.split_at(n);
                let (report, grads) = calql_loss(&self.critic, &self.calql, batch, cur, next, &mut rng)?;
                if !report.loss.is_finite() {
                    return Err(divergence("critic loss", report.loss, idx));
                }
                self.critic_opt.apply(&mut self.critic, &grads).map_err(|e| non_finite(e, idx))?;
                report
            }
            Algorithm::HybridParl => {
                let next = self.candidate_sets(&batch.next_states, None, 0, &mut rng)?;
                let (report, grads) = td_loss_hybrid(
                    &self.critic,
                    batch,
                    &next,
                    self.calql.backup_mode,
                    self.calql.discount,
                    &mut rng,
                )?;
                if !report.loss.is_finite() {
                    return Err(divergence("critic loss", report.loss, idx));
                }
                self.critic_opt.apply(&mut self.critic, &grads).map_err(|e| non_finite(e, idx))?;
                report
            }
        };
        Ok(report)
    }

    fn scoring_view<R: Rng + ?Sized>(&self, rng: &mut R) -> EnsembleView<'_> {
        self.critic.online_subset(rng)
    }

    /// An action from `source` at `state`.
    pub fn act_with<R: Rng + ?Sized>(
        &self,
        source: &ActionSource,
        state: &[Real],
        selection: Selection,
        rng: &mut R,
    ) -> Result<Vec<Real>> {
        match source {
            ActionSource::Parl => {
                let samples = self.policy.sample(state, self.action_opt.n_samples, rng)?;
                let view = self.scoring_view(rng);
                let (sets, _) = optimize_from_samples(&view, state, &[&samples], None, &self.action_opt)?;
                let (_, idx) = optimized_policy(&sets[0], selection, rng)?;
                Ok(sets[0].action(idx).to_vec())
            }
            ActionSource::Cem(cfg) => {
                let view = self.scoring_view(rng);
                Ok(cem_optimize(&view, state, cfg, rng, Some(&self.policy))?.action)
            }
            ActionSource::Raw => self.policy.sample(state, 1, rng),
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &[Real], selection: Selection, rng: &mut R) -> Result<Vec<Real>> {
        self.act_with(&self.spec.actor, state, selection, rng)
    }

    /// One episode from the start region. Stored rewards carry the reward bias; the
    /// returned flag reports whether the goal was reached and the returned value is the
    /// unbiased discounted return.
    pub fn rollout_with<R: Rng + ?Sized>(
        &self,
        source: &ActionSource,
        env: &PointMazeSpec,
        selection: Selection,
        rng: &mut R,
    ) -> Result<(Vec<Transition>, bool, Real)> {
        let mut s = env.reset(rng);
        let mut out = Vec::with_capacity(env.max_episode_steps);
        let mut ret = 0.0;
        let mut disc = 1.0;
        for t in 0..env.max_episode_steps {
            let a = self.act_with(source, &s, selection, rng)?;
            let o = env.step(&s, &a, t)?;
            ret += disc * o.reward;
            disc *= self.discount();
            out.push(Transition {
                state: s,
                action: a,
                reward: o.reward + self.reward_bias,
                next_state: o.next_state.clone(),
                done: o.terminal,
                mc_return: 0.0,
            });
            if o.terminal {
                return Ok((out, true, ret));
            }
            if o.truncated {
                break;
            }
            s = o.next_state;
        }
        Ok((out, false, ret))
    }

    pub fn rollout<R: Rng + ?Sized>(
        &self,
        env: &PointMazeSpec,
        selection: Selection,
        rng: &mut R,
    ) -> Result<(Vec<Transition>, bool, Real)> {
        self.rollout_with(&self.spec.actor, env, selection, rng)
    }

    /// Success fraction and mean discounted return over `n_episodes` rollouts seeded by
    /// `(seed, round, episode)`. Episodes run on the rayon pool.
    pub fn evaluate(&self, env: &PointMazeSpec, n_episodes: usize, round: u64, selection: Selection) -> Result<(Real, Real)> {
        if n_episodes == 0 {
            return Err(Error::Config("evaluation needs at least one episode".into()));
        }
        let results = (0..n_episodes)
            .into_par_iter()
            .map(|ep| {
                let mut rng = stream(self.seed, &[tag::EVAL, round, ep as u64]);
                self.rollout(env, selection, &mut rng).map(|(_, ok, ret)| (ok, ret))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = n_episodes as Real;
        let success = results.iter().filter(|r| r.0).count() as Real / n;
        let ret = results.iter().map(|r| r.1).sum::<Real>() / n;
        Ok((success, ret))
    }

    /// One policy improvement round on states drawn from the buffer. Returns the mean loss of
    /// the last epoch (0 when the policy is frozen).
    pub fn improve_policy(&mut self, buffer: &ReplayBuffer, train: &TrainLoopConfig) -> Result<Real> {
        let round = self.distillations;
        self.distillations += 1;
        let mut rng = stream(self.seed, &[tag::DISTILL, round]);
        let rows = buffer.sample(train.distill_states, &mut rng);
        let ds = self.critic.d_state();
        let curve = match self.spec.update.clone() {
            PolicyUpdate::Frozen => return Ok(0.0),
            PolicyUpdate::Distill => {
                let states: Vec<Real> = rows.iter().flat_map(|t| t.state.iter().copied()).collect();
                let actions: Vec<Real> = rows.iter().flat_map(|t| t.action.iter().copied()).collect();
                let before = self.policy.samples_drawn();
                let view = self.critic.online_subset(&mut rng);
                let samples = self.cache.lookup_many(&self.policy, &states, ds)?;
                let (sets, stats) = optimize_many(&view, &states, &samples, Some(&actions), &self.action_opt)?;
                self.local_stats.merge(stats);
                self.improvement_samples += self.policy.samples_drawn() - before;
                let data = distill_dataset_from_sets(&sets, &self.action_opt, self.policy.version())?;
                distill_policy(
                    &mut self.policy,
                    &mut self.policy_opt,
                    &data,
                    train.distill_epochs,
                    train.distill_batch,
                    train.distill_lr,
                    &mut rng,
                )?
            }
            PolicyUpdate::SelfImitation(cfg) => sil_distill(
                &mut self.policy,
                &mut self.policy_opt,
                &self.critic,
                self.value.as_ref(),
                &rows,
                &cfg,
                train.distill_epochs,
                train.distill_batch,
                train.distill_lr,
                &mut rng,
            )?,
        };
        Ok(curve.last().copied().unwrap_or(0.0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.policy.to_checkpoint(&mut ckpt, "policy");
        self.critic.to_checkpoint(&mut ckpt, "critic");
        if let Some(v) = &self.value {
            v.to_checkpoint(&mut ckpt, "value");
        }
        ckpt.push_scalar("agent.critic_updates", self.critic_updates as f64);
        ckpt.push_scalar("agent.distillations", self.distillations as f64);
        ckpt
    }

    /// Replaces policy, critic and value weights with those in `ckpt`. Optimizer state is
    /// reset.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint, critic_lr: Real) -> Result<()> {
        self.policy = PolicyHandle::from_checkpoint(ckpt, "policy")?;
        self.critic = CriticEnsemble::from_checkpoint(ckpt, "critic")?;
        if self.value.is_some() {
            self.value = Some(ValueNet::from_checkpoint(ckpt, "value")?);
        }
        self.critic_updates = ckpt.scalar("agent.critic_updates")? as u64;
        self.distillations = ckpt.scalar("agent.distillations")? as u64;
        self.critic_opt = CriticOptimizer::new(&self.critic, self.value.as_ref(), AdamConfig::with_lr(critic_lr));
        self.policy_opt = Adam::new(self.policy.net(), self.policy_opt.config().clone());
        Ok(())
    }
}
