use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critics::{CriticEnsemble, QFunction, ValueNet};
use crate::env::Transition;
use crate::error::{Error, Result};
use crate::Adam;
use crate::policies::PolicyHandle;
use crate::training::{distill_policy, OptimizedActionDataset};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SilWeighting {
    /// `max(0, A)`.
    #[default]
    Positive,
    /// `min(exp(A / temperature), max_weight)`.
    Exponential { temperature: Real, max_weight: Real },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SilConfig {
    pub weighting: SilWeighting,
}

/// Per-transition advantage `Q(s, a) - V(s)`, with the value net when present and the
/// Monte Carlo return otherwise.
pub fn advantages(critic: &CriticEnsemble, value: Option<&ValueNet>, rows: &[&Transition]) -> Result<Vec<Real>> {
    let states: Vec<Real> = rows.iter().flat_map(|t| t.state.iter().copied()).collect();
    let actions: Vec<Real> = rows.iter().flat_map(|t| t.action.iter().copied()).collect();
    let q = critic.online().q_rows(&states, &actions)?;
    let v = match value {
        Some(v) => v.values(&states)?,
        None => rows.iter().map(|t| t.mc_return).collect(),
    };
    Ok(q.iter().zip(&v).map(|(q, v)| q - v).collect())
}

pub fn sil_weights(adv: &[Real], weighting: SilWeighting) -> Result<Vec<Real>> {
    match weighting {
        SilWeighting::Positive => Ok(adv.iter().map(|a| a.max(0.0)).collect()),
        SilWeighting::Exponential { temperature, max_weight } => {
            if !(temperature > 0.0 && max_weight > 0.0) {
                return Err(Error::Config("exponential weighting needs positive temperature and cap".into()));
            }
            Ok(adv.iter().map(|a| (a / temperature).exp().min(max_weight)).collect())
        }
    }
}

/// Advantage-weighted likelihood on the given transitions' own actions. Draws no policy
/// samples.
#[allow(clippy::too_many_arguments)]
pub fn sil_distill<R: Rng + ?Sized>(
    policy: &mut PolicyHandle,
    optimizer: &mut Adam,
    critic: &CriticEnsemble,
    value: Option<&ValueNet>,
    rows: &[&Transition],
    config: &SilConfig,
    epochs: usize,
    batch_size: usize,
    learning_rate: Real,
    rng: &mut R,
) -> Result<Vec<Real>> {
    let adv = advantages(critic, value, rows)?;
    let w = sil_weights(&adv, config.weighting)?;
    let mut data = OptimizedActionDataset::new(policy.d_state(), policy.d_action(), policy.version());
    for (t, w) in rows.iter().zip(w) {
        data.push(&t.state, &t.action, w);
    }
    distill_policy(policy, optimizer, &data, epochs, batch_size, learning_rate, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critics::CriticHead;
    use crate::numerics::{Activation, AdamConfig, Normalizer};
    use crate::policies::{PolicyConfig, PolicyKind};
    use crate::rng::stream;

    fn transition(s: Real, a: Real, mc: Real) -> Transition {
        Transition { state: vec![s], action: vec![a], reward: -1.0, next_state: vec![s], done: false, mc_return: mc }
    }

    fn setup() -> (PolicyHandle, Adam, CriticEnsemble) {
        let mut rng = stream(2, &[0]);
        let cfg = PolicyConfig { kind: PolicyKind::TanhGaussian, hidden: vec![16], ..Default::default() };
        let p = PolicyHandle::new(&cfg, 1, 1, Normalizer::identity(1), &mut rng).unwrap();
        let opt = Adam::new(p.net(), AdamConfig::default());
        let c = CriticEnsemble::new(1, 1, &[16], Activation::Relu, 2, 2, CriticHead::Scalar, 0.005, Normalizer::identity(1), &mut rng)
            .unwrap();
        (p, opt, c)
    }

    #[test]
    fn non_positive_advantages_leave_policy() {
        let (mut p, mut opt, c) = setup();
        let before = p.net().params().clone();
        let drawn = p.samples_drawn();
        // mc returns far above any Q the fresh critic predicts
        let rows: Vec<Transition> = (0..16).map(|i| transition(i as Real * 0.05, 0.3, 1e6)).collect();
        let refs: Vec<&Transition> = rows.iter().collect();
        let curve = sil_distill(&mut p, &mut opt, &c, None, &refs, &SilConfig::default(), 2, 8, 1e-3, &mut stream(0, &[0]))
            .unwrap();
        assert!(curve.iter().all(|&l| l == 0.0));
        assert_eq!(p.net().params(), &before);
        assert_eq!(p.samples_drawn(), drawn);
    }

    #[test]
    fn uniform_advantages_match_plain_bc() {
        let (p0, _, _) = setup();
        let s: Vec<Real> = (0..8).map(|i| i as Real * 0.1).collect();
        let a: Vec<Real> = (0..8).map(|i| 0.5 - i as Real * 0.1).collect();
        let w = sil_weights(&[2.5; 8], SilWeighting::Positive).unwrap();
        let (l1, g1) = p0.loss_and_grad(&s, &a, Some(&w), &mut stream(0, &[0])).unwrap();
        let (l2, g2) = p0.loss_and_grad(&s, &a, None, &mut stream(0, &[0])).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.max_abs_diff(&g2) < 1e-12);
    }

    #[test]
    fn zero_advantage_action_is_masked() {
        let w = sil_weights(&[1.0, 0.0], SilWeighting::Positive).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
        let (p, _, _) = setup();
        let s = [0.2, 0.2];
        let a = [0.7, -0.7];
        let mixed = p.loss(&s, &a, Some(&w), &mut stream(0, &[0])).unwrap();
        let only_first = p.loss(&s[..1], &a[..1], None, &mut stream(0, &[0])).unwrap();
        assert!((mixed - only_first).abs() < 1e-12);
    }
}
