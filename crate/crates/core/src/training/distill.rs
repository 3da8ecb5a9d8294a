use rand::seq::SliceRandom;
use rand::Rng;

use crate::action_opt::{optimize_actions, optimized_policy, uses_argmax, ActionCandidateSet, ActionOptConfig};
use crate::critics::QFunction;
use crate::error::{Error, Result};
use crate::Adam;
use crate::policies::PolicyHandle;
use crate::rng::{stream, tag};
use crate::Real;

/// Weighted `(state, action)` pairs for supervised policy training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizedActionDataset {
    pub states: Vec<Real>,
    pub actions: Vec<Real>,
    pub weights: Vec<Real>,
    pub d_state: usize,
    pub d_action: usize,
    pub source_policy_version: u64,
}

impl OptimizedActionDataset {
    pub fn new(d_state: usize, d_action: usize, source_policy_version: u64) -> Self {
        OptimizedActionDataset { d_state, d_action, source_policy_version, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn push(&mut self, state: &[Real], action: &[Real], weight: Real) {
        self.states.extend_from_slice(state);
        self.actions.extend_from_slice(action);
        self.weights.push(weight);
    }

    pub fn state(&self, i: usize) -> &[Real] {
        &self.states[i * self.d_state..(i + 1) * self.d_state]
    }

    pub fn action(&self, i: usize) -> &[Real] {
        &self.actions[i * self.d_action..(i + 1) * self.d_action]
    }
}

/// One entry per set holding the argmax with weight 1 when the selection rule picks the
/// argmax for that set, otherwise every candidate weighted by its softmax probability.
pub fn distill_dataset_from_sets(
    sets: &[ActionCandidateSet],
    config: &ActionOptConfig,
    source_policy_version: u64,
) -> Result<OptimizedActionDataset> {
    let first = sets.first().ok_or_else(|| Error::Contract("no candidate sets to distill".into()))?;
    let mut out = OptimizedActionDataset::new(first.state.len(), first.d_action, source_policy_version);
    for set in sets {
        if set.is_empty() {
            return Err(Error::Contract("empty candidate set".into()));
        }
        if uses_argmax(config.selection, &set.q_values) {
            out.push(&set.state, set.action(set.best()), 1.0);
        } else {
            for (i, p) in set.probabilities().into_iter().enumerate() {
                out.push(&set.state, set.action(i), p);
            }
        }
    }
    Ok(out)
}

/// Runs the action optimization at every state and collects the optimized actions.
pub fn build_distill_dataset<Q: QFunction + ?Sized>(
    states: &[Real],
    policy: &PolicyHandle,
    critic: &Q,
    config: &ActionOptConfig,
    seed: u64,
) -> Result<OptimizedActionDataset> {
    let ds = policy.d_state();
    let sets = states
        .chunks(ds)
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream(seed, &[tag::DISTILL, policy.version(), i as u64]);
            let set = optimize_actions(policy, critic, s, config, &mut rng, None)?;
            // validates the set against the selection rule
            optimized_policy(&set, config.selection, &mut rng)?;
            Ok(set)
        })
        .collect::<Result<Vec<_>>>()?;
    distill_dataset_from_sets(&sets, config, policy.version())
}

/// Weighted supervised training on `data` for `epochs` shuffled passes. Minibatches whose
/// weights sum to zero are skipped. Returns the mean loss per epoch and bumps the policy
/// version.
pub fn distill_policy<R: Rng + ?Sized>(
    policy: &mut PolicyHandle,
    optimizer: &mut Adam,
    data: &OptimizedActionDataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: Real,
    rng: &mut R,
) -> Result<Vec<Real>> {
    if data.is_empty() {
        return Err(Error::Contract("distillation dataset is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    optimizer.set_learning_rate(learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    let (mut s, mut a, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            s.clear();
            a.clear();
            w.clear();
            for &i in chunk {
                s.extend_from_slice(data.state(i));
                a.extend_from_slice(data.action(i));
                w.push(data.weights[i]);
            }
            batches += 1;
            if w.iter().sum::<Real>() <= 0.0 {
                continue;
            }
            let (loss, grads) = policy.loss_and_grad(&s, &a, Some(&w), rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("policy loss {loss}")));
            }
            optimizer.step(policy.net_mut(), &grads)?;
            total += loss;
        }
        curve.push(total / batches.max(1) as Real);
    }
    policy.bump_version();
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_opt::{Provenance, Selection};
    use crate::critics::ClosureQ;
    use crate::numerics::{AdamConfig, Normalizer};
    use crate::policies::{PolicyConfig, PolicyKind};

    fn set(q: Vec<Real>) -> ActionCandidateSet {
        let n = q.len();
        ActionCandidateSet {
            state: vec![0.5],
            actions: (0..n).map(|i| i as Real / n as Real).collect(),
            q_values: q,
            provenance: vec![Provenance::PolicySample; n],
            d_action: 1,
        }
    }

    fn policy(kind: PolicyKind) -> PolicyHandle {
        let cfg = PolicyConfig { kind, hidden: vec![32, 32], ..Default::default() };
        PolicyHandle::new(&cfg, 1, 1, Normalizer::identity(1), &mut stream(3, &[0])).unwrap()
    }

    #[test]
    fn singleton_sets_give_unit_weights() {
        let sets = vec![set(vec![0.3]), set(vec![-2.0])];
        let cfg = ActionOptConfig { selection: Selection::SoftmaxSample, ..Default::default() };
        let d = distill_dataset_from_sets(&sets, &cfg, 4).unwrap();
        assert_eq!(d.weights, vec![1.0, 1.0]);
        assert_eq!(d.source_policy_version, 4);
    }

    #[test]
    fn softmax_weights_sum_to_one_per_state() {
        let sets: Vec<_> = (0..5).map(|k| set((0..10).map(|i| ((i * 7 + k) % 10) as Real * 0.4).collect())).collect();
        let cfg = ActionOptConfig { selection: Selection::SoftmaxSample, ..Default::default() };
        let d = distill_dataset_from_sets(&sets, &cfg, 0).unwrap();
        assert_eq!(d.len(), 50);
        for chunk in d.weights.chunks(10) {
            assert!((chunk.iter().sum::<Real>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn argmax_mode_stores_brute_force_maximizer() {
        let q = ClosureQ {
            d_state: 1,
            d_action: 1,
            q: |_: &[Real], a: &[Real]| -(a[0] - 0.37).powi(2),
            grad: |_: &[Real], a: &[Real]| vec![-2.0 * (a[0] - 0.37)],
        };
        let p = policy(PolicyKind::TanhGaussian);
        let cfg = ActionOptConfig { n_grad_steps: 0, top_m: 10, selection: Selection::Argmax, ..Default::default() };
        let data = build_distill_dataset(&[0.1, -0.4], &p, &q, &cfg, 11).unwrap();
        assert_eq!(data.len(), 2);
        for i in 0..2 {
            let mut rng = stream(11, &[tag::DISTILL, 0, i as u64]);
            let samples = p.sample(&[[0.1, -0.4][i]], cfg.n_samples, &mut rng).unwrap();
            let best = samples
                .iter()
                .copied()
                .max_by(|a, b| (-(a - 0.37).powi(2)).partial_cmp(&-(b - 0.37).powi(2)).unwrap())
                .unwrap();
            assert_eq!(data.action(i)[0], best);
        }
    }

    #[test]
    fn zero_epochs_only_bump_version() {
        let mut p = policy(PolicyKind::DiffusionDdpm);
        let before = p.net().params().clone();
        let mut opt = Adam::new(p.net(), AdamConfig::default());
        let mut data = OptimizedActionDataset::new(1, 1, 0);
        data.push(&[0.0], &[0.5], 1.0);
        let curve = distill_policy(&mut p, &mut opt, &data, 0, 8, 1e-3, &mut stream(0, &[1])).unwrap();
        assert!(curve.is_empty());
        assert_eq!(p.net().params(), &before);
        assert_eq!(p.version(), 1);
    }

    #[test]
    fn zero_weights_leave_parameters() {
        let mut p = policy(PolicyKind::TanhGaussian);
        let before = p.net().params().clone();
        let mut opt = Adam::new(p.net(), AdamConfig::default());
        let mut data = OptimizedActionDataset::new(1, 1, 0);
        for i in 0..20 {
            data.push(&[i as Real * 0.1], &[0.2], 0.0);
        }
        distill_policy(&mut p, &mut opt, &data, 3, 8, 1e-3, &mut stream(0, &[1])).unwrap();
        assert_eq!(p.net().params(), &before);
    }

    #[test]
    fn gaussian_converges_to_constant_action() {
        let mut p = policy(PolicyKind::TanhGaussian);
        let mut opt = Adam::new(p.net(), AdamConfig::default());
        let mut data = OptimizedActionDataset::new(1, 1, 0);
        let mut rng = stream(5, &[0]);
        for _ in 0..256 {
            data.push(&[rng.random_range(-1.0..1.0)], &[0.6], 1.0);
        }
        distill_policy(&mut p, &mut opt, &data, 150, 64, 3e-3, &mut rng).unwrap();
        let held_out: Vec<Real> = (0..20).map(|i| -0.95 + 0.1 * i as Real).collect();
        let mut total = 0.0;
        for s in &held_out {
            total += p.sample(&[*s], 50, &mut rng).unwrap().iter().sum::<Real>() / 50.0;
        }
        let mean = total / held_out.len() as Real;
        assert!((mean - 0.6).abs() < 0.05, "mean sample {mean}");
    }

    #[test]
    fn diffusion_loss_decreases_by_epoch() {
        let mut p = policy(PolicyKind::DiffusionDdpm);
        let mut opt = Adam::new(p.net(), AdamConfig::default());
        let mut data = OptimizedActionDataset::new(1, 1, 0);
        let mut rng = stream(6, &[0]);
        for _ in 0..2048 {
            let s: Real = rng.random_range(-1.0..1.0);
            data.push(&[s], &[(0.8 * s).clamp(-1.0, 1.0)], 1.0);
        }
        let curve = distill_policy(&mut p, &mut opt, &data, 10, 64, 1e-3, &mut rng).unwrap();
        for w in curve.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "curve {curve:?}");
        }
        assert!(curve.last().unwrap() < &curve[0]);
    }
}
