use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::action_opt::{ranking, ActionCandidateSet, Provenance};
use crate::critics::QFunction;
use crate::error::{Error, Result};
use crate::policies::PolicyHandle;
use crate::Real;

pub const CEM_STD_FLOOR: Real = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CemInit {
    #[default]
    UniformRandom,
    FrozenPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    pub init: CemInit,
    /// Std of the zero-mean Gaussian behind the first population under `uniform_random`;
    /// values of 1 or more draw uniformly from the action box instead.
    pub init_std: Real,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig { population: 64, elites: 6, iterations: 4, init: CemInit::UniformRandom, init_std: 1.0 }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.elites == 0 || self.elites > self.population {
            return Err(Error::Config(format!("need 1 <= elites ({}) <= population ({})", self.elites, self.population)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("CEM needs at least one iteration".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemResult {
    pub action: Vec<Real>,
    pub q: Real,
    pub initial_mean_q: Real,
    pub final_elite_mean_q: Real,
    /// Gaussian fitted to the last elites.
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
    /// Last elites in descending Q order.
    pub elites: ActionCandidateSet,
}

/// Cross-entropy search for a high-Q action at one state.
pub fn cem_optimize<Q: QFunction + ?Sized, R: Rng + ?Sized>(
    critic: &Q,
    state: &[Real],
    config: &CemConfig,
    rng: &mut R,
    seed_policy: Option<&PolicyHandle>,
) -> Result<CemResult> {
    config.validate()?;
    let d = critic.d_action();
    let n = config.population;
    let mut pop: Vec<Real> = match config.init {
        CemInit::UniformRandom if config.init_std >= 1.0 => (0..n * d).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        CemInit::UniformRandom => (0..n * d)
            .map(|_| (config.init_std * rng.sample::<Real, _>(StandardNormal)).clamp(-1.0, 1.0))
            .collect(),
        CemInit::FrozenPolicy => {
            let policy = seed_policy.ok_or_else(|| Error::Contract("frozen_policy CEM needs a policy".into()))?;
            policy.sample(state, n, rng)?
        }
    };
    let mut initial_mean_q = 0.0;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for it in 0..config.iterations {
        let q = critic.q_at(state, &pop)?;
        if it == 0 {
            initial_mean_q = q.iter().sum::<Real>() / n as Real;
        }
        let order = ranking(&q);
        let elite = &order[..config.elites];
        for j in 0..d {
            let m = elite.iter().map(|&i| pop[i * d + j]).sum::<Real>() / elite.len() as Real;
            let v = elite.iter().map(|&i| (pop[i * d + j] - m).powi(2)).sum::<Real>() / elite.len() as Real;
            mean[j] = m;
            std[j] = v.sqrt().max(CEM_STD_FLOOR);
        }
        if it + 1 == config.iterations {
            let elites = ActionCandidateSet {
                state: state.to_vec(),
                actions: elite.iter().flat_map(|&i| pop[i * d..(i + 1) * d].to_vec()).collect(),
                q_values: elite.iter().map(|&i| q[i]).collect(),
                provenance: vec![Provenance::PolicySample; elite.len()],
                d_action: d,
            };
            let final_elite_mean_q = elites.q_values.iter().sum::<Real>() / elite.len() as Real;
            return Ok(CemResult {
                action: elites.action(0).to_vec(),
                q: elites.q_values[0],
                initial_mean_q,
                final_elite_mean_q,
                mean,
                std,
                elites,
            });
        }
        pop = (0..n * d)
            .map(|i| (mean[i % d] + std[i % d] * rng.sample::<Real, _>(StandardNormal)).clamp(-1.0, 1.0))
            .collect();
    }
    unreachable!("iterations >= 1")
}
