use serde::{Deserialize, Serialize};

use super::cem::{CemConfig, CemInit};
use super::sil::SilConfig;
use crate::action_opt::ActionOptConfig;
use crate::training::{ActionSource, AgentSpec, Algorithm, PolicyUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoGlobal,
    NoLocal,
}

/// `no_global` keeps a single policy sample, `no_local` skips gradient steps.
pub fn ablation_config(base: &ActionOptConfig, which: Ablation) -> ActionOptConfig {
    match which {
        Ablation::Full => base.clone(),
        Ablation::NoGlobal => ActionOptConfig { n_samples: 1, top_m: 1, include_dataset_action: false, ..base.clone() },
        Ablation::NoLocal => ActionOptConfig { n_grad_steps: 0, ..base.clone() },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    #[default]
    Full,
    NoGlobal,
    NoLocal,
    CemScratch,
    CemPolicy,
    Sil,
}

impl Arm {
    pub const ALL: [Arm; 6] = [Arm::Full, Arm::NoGlobal, Arm::NoLocal, Arm::CemScratch, Arm::CemPolicy, Arm::Sil];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoGlobal => "no_global",
            Arm::NoLocal => "no_local",
            Arm::CemScratch => "cem_scratch",
            Arm::CemPolicy => "cem_policy",
            Arm::Sil => "sil",
        }
    }

    pub fn action_opt(self, base: &ActionOptConfig) -> ActionOptConfig {
        match self {
            Arm::NoGlobal => ablation_config(base, Ablation::NoGlobal),
            Arm::NoLocal => ablation_config(base, Ablation::NoLocal),
            _ => base.clone(),
        }
    }

    /// The self-imitation arm always learns an expectile critic.
    pub fn algorithm(self, requested: Algorithm) -> Algorithm {
        match self {
            Arm::Sil => Algorithm::IqlParl,
            _ => requested,
        }
    }

    pub fn spec(self, algorithm: Algorithm, cem: &CemConfig, sil: &SilConfig) -> AgentSpec {
        let algorithm = self.algorithm(algorithm);
        let cem_with = |init| ActionSource::Cem(CemConfig { init, ..cem.clone() });
        match self {
            Arm::Full | Arm::NoGlobal | Arm::NoLocal => AgentSpec::parl(algorithm),
            Arm::CemScratch => AgentSpec {
                algorithm,
                actor: cem_with(CemInit::UniformRandom),
                targets: cem_with(CemInit::UniformRandom),
                update: PolicyUpdate::Frozen,
            },
            Arm::CemPolicy => AgentSpec {
                algorithm,
                actor: cem_with(CemInit::FrozenPolicy),
                targets: cem_with(CemInit::FrozenPolicy),
                update: PolicyUpdate::Frozen,
            },
            Arm::Sil => AgentSpec {
                algorithm,
                actor: ActionSource::Raw,
                targets: ActionSource::Parl,
                update: PolicyUpdate::SelfImitation(*sil),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_opt::{global_optimize, optimize_actions};
    use crate::critics::ClosureQ;
    use crate::numerics::Normalizer;
    use crate::policies::{PolicyConfig, PolicyHandle, PolicyKind};
    use crate::rng::stream;
    use crate::Real;

    fn quad() -> ClosureQ<impl Fn(&[Real], &[Real]) -> Real + Sync, impl Fn(&[Real], &[Real]) -> Vec<Real> + Sync> {
        ClosureQ {
            d_state: 1,
            d_action: 1,
            q: |_: &[Real], a: &[Real]| -(a[0] - 0.2).powi(2),
            grad: |_: &[Real], a: &[Real]| vec![-2.0 * (a[0] - 0.2)],
        }
    }

    fn policy() -> PolicyHandle {
        let cfg = PolicyConfig { kind: PolicyKind::TanhGaussian, hidden: vec![8], ..Default::default() };
        PolicyHandle::new(&cfg, 1, 1, Normalizer::identity(1), &mut stream(1, &[0])).unwrap()
    }

    #[test]
    fn no_local_equals_global() {
        let cfg = ablation_config(&ActionOptConfig { step_size: 0.1, ..Default::default() }, Ablation::NoLocal);
        assert_eq!(cfg.n_grad_steps, 0);
        let p = policy();
        let a = optimize_actions(&p, &quad(), &[0.3], &cfg, &mut stream(4, &[1]), None).unwrap();
        let b = global_optimize(&p, &quad(), &[0.3], &cfg, &mut stream(4, &[1]), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_global_is_one_optimized_candidate() {
        let cfg = ablation_config(&ActionOptConfig { step_size: 0.1, ..Default::default() }, Ablation::NoGlobal);
        let p = policy();
        let g = global_optimize(&p, &quad(), &[0.3], &cfg, &mut stream(4, &[1]), None).unwrap();
        let a = optimize_actions(&p, &quad(), &[0.3], &cfg, &mut stream(4, &[1]), None).unwrap();
        assert_eq!(a.len(), 1);
        assert!(a.q_values[0] >= g.q_values[0]);
    }

    #[test]
    fn full_is_identity() {
        let base = ActionOptConfig { n_samples: 7, top_m: 3, ..Default::default() };
        assert_eq!(ablation_config(&base, Ablation::Full), base);
    }

    #[test]
    fn arm_names_round_trip_through_serde() {
        for arm in Arm::ALL {
            let s = serde_json::to_string(&arm).unwrap();
            assert_eq!(s, format!("\"{}\"", arm.name()));
        }
    }
}
