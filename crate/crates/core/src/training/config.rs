use serde::{Deserialize, Serialize};

use crate::action_opt::Selection;
use crate::critics::{BellmanActions, CalQlConfig};
use crate::error::{Error, Result};
use crate::numerics::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    CalqlParl,
    IqlParl,
    HybridParl,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::CalqlParl => "calql_parl",
            Algorithm::IqlParl => "iql_parl",
            Algorithm::HybridParl => "hybrid_parl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Scalar,
    HlGauss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Defaults to 2, or 10 for the hybrid algorithm.
    pub ensemble_size: Option<usize>,
    pub subsample_size: Option<usize>,
    pub head: HeadKind,
    pub hl_bins: usize,
    pub hl_sigma_ratio: f64,
    pub hl_v_min: f64,
    pub hl_v_max: f64,
    pub polyak_tau: f64,
    pub calql: CalQlConfig,
    pub expectile: f64,
    pub bellman_actions: BellmanActions,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            ensemble_size: None,
            subsample_size: None,
            head: HeadKind::Scalar,
            hl_bins: 51,
            hl_sigma_ratio: 0.75,
            hl_v_min: -100.0,
            hl_v_max: 0.0,
            polyak_tau: 0.005,
            calql: CalQlConfig::default(),
            expectile: 0.9,
            bellman_actions: BellmanActions::Optimized,
        }
    }
}

impl CriticConfig {
    pub fn ensemble(&self, algorithm: Algorithm) -> (usize, usize) {
        let (size, sub) = match algorithm {
            Algorithm::HybridParl => (10, 2),
            _ => (2, 2),
        };
        (self.ensemble_size.unwrap_or(size), self.subsample_size.unwrap_or(sub))
    }

    pub fn validate(&self) -> Result<()> {
        self.calql.validate()?;
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("critic hidden sizes must be positive".into()));
        }
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return Err(Error::Config(format!("expectile {} outside (0, 1)", self.expectile)));
        }
        if !(0.0..=1.0).contains(&self.polyak_tau) {
            return Err(Error::Config("polyak_tau outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainLoopConfig {
    pub algorithm: Algorithm,
    pub bc_steps: usize,
    pub bc_lr: f64,
    pub offline_grad_steps: usize,
    pub online_env_episodes: usize,
    pub warmup_episodes: usize,
    /// Critic updates per environment step; defaults to 1, or 10 for the hybrid algorithm.
    pub utd_ratio: Option<usize>,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Selection rule used when evaluating; `None` uses the action optimization rule.
    pub eval_selection: Option<Selection>,
    pub distill_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub mixing_ratio: f64,
    pub buffer_capacity: usize,
    pub distill_every_episodes: usize,
    /// Offline critic steps between distillations; 0 disables offline distillation.
    pub distill_every_steps: usize,
    /// States annotated with optimized actions per distillation.
    pub distill_states: usize,
    pub distill_epochs: usize,
    pub distill_batch: usize,
    pub seed: u64,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        TrainLoopConfig {
            algorithm: Algorithm::CalqlParl,
            bc_steps: 2000,
            bc_lr: 1e-3,
            offline_grad_steps: 2000,
            online_env_episodes: 200,
            warmup_episodes: 0,
            utd_ratio: None,
            eval_every: 20,
            eval_episodes: 32,
            eval_selection: None,
            distill_lr: 3e-4,
            critic_lr: 3e-4,
            batch_size: 64,
            mixing_ratio: 0.5,
            buffer_capacity: 1_000_000,
            distill_every_episodes: 10,
            distill_every_steps: 10_000,
            distill_states: 1024,
            distill_epochs: 1,
            distill_batch: 256,
            seed: 0,
        }
    }
}

impl TrainLoopConfig {
    pub fn utd(&self) -> usize {
        self.utd_ratio.unwrap_or(match self.algorithm {
            Algorithm::HybridParl => 10,
            _ => 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("distill_every_episodes", self.distill_every_episodes),
            ("distill_states", self.distill_states),
            ("distill_batch", self.distill_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.utd_ratio == Some(0) {
            return Err(Error::Config("utd_ratio must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mixing_ratio) {
            return Err(Error::Config("mixing_ratio outside [0, 1]".into()));
        }
        for (name, lr) in [("bc_lr", self.bc_lr), ("distill_lr", self.distill_lr), ("critic_lr", self.critic_lr)] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}
