//! Global re-ranking, accepted local gradient ascent, and the softmax policy over
//! optimized candidates.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critics::QFunction;
use crate::error::{Error, Result};
use crate::numerics::{softmax, std_dev};
use crate::policies::{argmax, draw, PolicyHandle};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Selection {
    SoftmaxSample,
    Argmax,
    /// Argmax when the candidate Q-values spread less than `threshold` (population std).
    Auto { threshold: Real },
}

impl Default for Selection {
    fn default() -> Self {
        Selection::Auto { threshold: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionOptConfig {
    pub n_samples: usize,
    pub top_m: usize,
    pub n_grad_steps: usize,
    pub step_size: Real,
    pub include_dataset_action: bool,
    pub selection: Selection,
    /// Keep a local step only if it strictly raises Q.
    pub accept_test: bool,
}

impl Default for ActionOptConfig {
    fn default() -> Self {
        ActionOptConfig {
            n_samples: 32,
            top_m: 10,
            n_grad_steps: 10,
            step_size: 3e-4,
            include_dataset_action: false,
            selection: Selection::default(),
            accept_test: true,
        }
    }
}

impl ActionOptConfig {
    pub fn validate(&self) -> Result<()> {
        let pool = self.n_samples + usize::from(self.include_dataset_action);
        if self.n_samples == 0 || self.top_m == 0 || self.top_m > pool {
            return Err(Error::Config(format!(
                "need 1 <= top_m ({}) <= candidate pool ({pool}) and n_samples >= 1",
                self.top_m
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if let Selection::Auto { threshold } = self.selection {
            if !(threshold >= 0.0) {
                return Err(Error::Config("auto selection threshold must be non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    PolicySample,
    DatasetAction,
}

/// Candidate actions at one state, sorted by descending Q.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionCandidateSet {
    pub state: Vec<Real>,
    /// Row-major, `len() * d_action` values.
    pub actions: Vec<Real>,
    pub q_values: Vec<Real>,
    pub provenance: Vec<Provenance>,
    pub d_action: usize,
}

impl ActionCandidateSet {
    pub fn len(&self) -> usize {
        self.q_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_values.is_empty()
    }

    pub fn action(&self, i: usize) -> &[Real] {
        &self.actions[i * self.d_action..(i + 1) * self.d_action]
    }

    /// Softmax of the Q-values.
    pub fn probabilities(&self) -> Vec<Real> {
        softmax(&self.q_values)
    }

    /// Index of the highest Q-value; the earliest one on ties.
    pub fn best(&self) -> usize {
        ranking(&self.q_values)[0]
    }

    /// Restores descending-Q order. Equal values keep their relative order.
    pub fn sort(&mut self) {
        let order = ranking(&self.q_values);
        let d = self.d_action;
        let actions = order.iter().flat_map(|&i| self.actions[i * d..(i + 1) * d].to_vec()).collect();
        self.q_values = order.iter().map(|&i| self.q_values[i]).collect();
        self.provenance = order.iter().map(|&i| self.provenance[i]).collect();
        self.actions = actions;
    }
}

fn key(q: Real) -> Real {
    if q.is_nan() {
        Real::NEG_INFINITY
    } else {
        q
    }
}

/// Indices sorted by descending value, ties by index, NaN last.
pub fn ranking(q: &[Real]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    idx.sort_by(|&a, &b| key(q[b]).partial_cmp(&key(q[a])).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Scores `samples` (plus an optional dataset action appended last) and keeps the top `m`.
pub fn rank_candidates<Q: QFunction + ?Sized>(
    critic: &Q,
    state: &[Real],
    samples: &[Real],
    dataset_action: Option<&[Real]>,
    m: usize,
) -> Result<ActionCandidateSet> {
    let d = critic.d_action();
    let mut pool = samples.to_vec();
    let mut provenance = vec![Provenance::PolicySample; samples.len() / d];
    if let Some(a) = dataset_action {
        pool.extend_from_slice(a);
        provenance.push(Provenance::DatasetAction);
    }
    let q = critic.q_at(state, &pool)?;
    let order = ranking(&q);
    let keep = &order[..m.min(order.len())];
    Ok(ActionCandidateSet {
        state: state.to_vec(),
        actions: keep.iter().flat_map(|&i| pool[i * d..(i + 1) * d].to_vec()).collect(),
        q_values: keep.iter().map(|&i| q[i]).collect(),
        provenance: keep.iter().map(|&i| provenance[i]).collect(),
        d_action: d,
    })
}

/// Samples `k` actions from the policy and keeps the `m` best under the critic.
pub fn global_optimize<Q: QFunction + ?Sized, R: Rng + ?Sized>(
    policy: &PolicyHandle,
    critic: &Q,
    state: &[Real],
    config: &ActionOptConfig,
    rng: &mut R,
    dataset_action: Option<&[Real]>,
) -> Result<ActionCandidateSet> {
    config.validate()?;
    let samples = policy.sample(state, config.n_samples, rng)?;
    let extra = if config.include_dataset_action { dataset_action } else { None };
    rank_candidates(critic, state, &samples, extra, config.top_m)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LocalStats {
    pub accepted_steps: u64,
    pub rejected_steps: u64,
    pub non_finite: u64,
}

impl LocalStats {
    pub fn merge(&mut self, other: LocalStats) {
        self.accepted_steps += other.accepted_steps;
        self.rejected_steps += other.rejected_steps;
        self.non_finite += other.non_finite;
    }
}

/// Gradient ascent on every candidate of every set, batched into one critic call per step.
///
/// A step moves `a <- clip(a + step_size * dQ/da)`. With the acceptance test a step is kept
/// only if Q strictly increases; the first rejection ends that candidate's ascent. When
/// `history` is given it receives, per candidate in set order, the Q-values at the start
/// and after every kept step.
pub fn local_optimize_batch<Q: QFunction + ?Sized>(
    critic: &Q,
    sets: &mut [ActionCandidateSet],
    config: &ActionOptConfig,
    mut history: Option<&mut Vec<Vec<Real>>>,
) -> Result<LocalStats> {
    let mut stats = LocalStats::default();
    let d = critic.d_action();
    let ds = critic.d_state();
    let mut owner = Vec::new();
    for (si, set) in sets.iter().enumerate() {
        owner.extend((0..set.len()).map(|ci| (si, ci)));
    }
    if let Some(h) = history.as_deref_mut() {
        h.clear();
        h.extend(owner.iter().map(|&(si, ci)| vec![sets[si].q_values[ci]]));
    }
    if config.n_grad_steps == 0 || owner.is_empty() {
        return Ok(stats);
    }
    let mut states = Vec::with_capacity(owner.len() * ds);
    let mut actions = Vec::with_capacity(owner.len() * d);
    for &(si, ci) in &owner {
        states.extend_from_slice(&sets[si].state);
        actions.extend_from_slice(sets[si].action(ci));
    }
    let (mut q, mut grad) = critic.q_grad_rows(&states, &actions)?;
    let mut active: Vec<usize> = Vec::with_capacity(owner.len());
    for r in 0..owner.len() {
        if grad[r * d..(r + 1) * d].iter().all(|g| g.is_finite()) && q[r].is_finite() {
            active.push(r);
        } else {
            stats.non_finite += 1;
        }
    }
    // sets may have been scored by an older critic
    for (r, &(si, ci)) in owner.iter().enumerate() {
        sets[si].q_values[ci] = q[r];
    }
    let mut prop_states = Vec::new();
    let mut proposals = Vec::new();
    for _ in 0..config.n_grad_steps {
        if active.is_empty() {
            break;
        }
        prop_states.clear();
        proposals.clear();
        for &r in &active {
            prop_states.extend_from_slice(&states[r * ds..(r + 1) * ds]);
            for j in 0..d {
                proposals.push((actions[r * d + j] + config.step_size * grad[r * d + j]).clamp(-1.0, 1.0));
            }
        }
        let (pq, pg) = critic.q_grad_rows(&prop_states, &proposals)?;
        let mut still = Vec::with_capacity(active.len());
        for (k, &r) in active.iter().enumerate() {
            let accept = if config.accept_test { pq[k] > q[r] } else { pq[k].is_finite() };
            if !accept {
                stats.rejected_steps += 1;
                continue;
            }
            stats.accepted_steps += 1;
            actions[r * d..(r + 1) * d].copy_from_slice(&proposals[k * d..(k + 1) * d]);
            q[r] = pq[k];
            grad[r * d..(r + 1) * d].copy_from_slice(&pg[k * d..(k + 1) * d]);
            if let Some(h) = history.as_deref_mut() {
                h[r].push(pq[k]);
            }
            if pg[k * d..(k + 1) * d].iter().all(|g| g.is_finite()) {
                still.push(r);
            } else {
                stats.non_finite += 1;
            }
        }
        active = still;
    }
    for (r, &(si, ci)) in owner.iter().enumerate() {
        let set = &mut sets[si];
        set.actions[ci * d..(ci + 1) * d].copy_from_slice(&actions[r * d..(r + 1) * d]);
        set.q_values[ci] = q[r];
    }
    sets.iter_mut().for_each(ActionCandidateSet::sort);
    Ok(stats)
}

pub fn local_optimize<Q: QFunction + ?Sized>(
    critic: &Q,
    candidates: ActionCandidateSet,
    config: &ActionOptConfig,
) -> Result<(ActionCandidateSet, LocalStats)> {
    let mut sets = [candidates];
    let stats = local_optimize_batch(critic, &mut sets, config, None)?;
    let [set] = sets;
    Ok((set, stats))
}

/// Global then local optimization at one state.
pub fn optimize_actions<Q: QFunction + ?Sized, R: Rng + ?Sized>(
    policy: &PolicyHandle,
    critic: &Q,
    state: &[Real],
    config: &ActionOptConfig,
    rng: &mut R,
    dataset_action: Option<&[Real]>,
) -> Result<ActionCandidateSet> {
    let set = global_optimize(policy, critic, state, config, rng, dataset_action)?;
    Ok(local_optimize(critic, set, config)?.0)
}

/// Global and local optimization for many states from pre-drawn policy samples.
pub fn optimize_from_samples<Q: QFunction + ?Sized>(
    critic: &Q,
    states: &[Real],
    samples: &[&[Real]],
    dataset_actions: Option<&[Real]>,
    config: &ActionOptConfig,
) -> Result<(Vec<ActionCandidateSet>, LocalStats)> {
    let ds = critic.d_state();
    let d = critic.d_action();
    let mut sets = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let extra = if config.include_dataset_action {
            dataset_actions.map(|a| &a[i * d..(i + 1) * d])
        } else {
            None
        };
        sets.push(rank_candidates(critic, &states[i * ds..(i + 1) * ds], s, extra, config.top_m)?);
    }
    let stats = local_optimize_batch(critic, &mut sets, config, None)?;
    Ok((sets, stats))
}

/// [`optimize_from_samples`] over fixed-size chunks of states on the rayon pool. Chunks are
/// merged in index order and each set depends only on its own inputs, so the result does
/// not depend on the number of threads.
pub fn optimize_many<Q: QFunction + ?Sized>(
    critic: &Q,
    states: &[Real],
    samples: &[&[Real]],
    dataset_actions: Option<&[Real]>,
    config: &ActionOptConfig,
) -> Result<(Vec<ActionCandidateSet>, LocalStats)> {
    const CHUNK: usize = 32;
    let ds = critic.d_state();
    let d = critic.d_action();
    let n = samples.len();
    if states.len() != n * ds {
        return Err(Error::Dimension(format!("{} state values for {n} sample sets", states.len())));
    }
    let parts = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let (lo, hi) = (c * CHUNK, ((c + 1) * CHUNK).min(n));
            optimize_from_samples(
                critic,
                &states[lo * ds..hi * ds],
                &samples[lo..hi],
                dataset_actions.map(|a| &a[lo * d..hi * d]),
                config,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sets = Vec::with_capacity(n);
    let mut stats = LocalStats::default();
    for (s, st) in parts {
        sets.extend(s);
        stats.merge(st);
    }
    Ok((sets, stats))
}

/// Whether the selection rule picks the argmax for these Q-values.
pub fn uses_argmax(selection: Selection, q_values: &[Real]) -> bool {
    match selection {
        Selection::Argmax => true,
        Selection::SoftmaxSample => false,
        Selection::Auto { threshold } => std_dev(q_values) < threshold,
    }
}

/// The softmax distribution over candidates and the index chosen by the selection rule.
pub fn optimized_policy<R: Rng + ?Sized>(
    candidates: &ActionCandidateSet,
    selection: Selection,
    rng: &mut R,
) -> Result<(Vec<Real>, usize)> {
    if candidates.is_empty() {
        return Err(Error::Contract("optimized policy over an empty candidate set".into()));
    }
    let p = candidates.probabilities();
    let chosen = if uses_argmax(selection, &candidates.q_values) {
        argmax(&candidates.q_values.iter().map(|&q| key(q)).collect::<Vec<_>>())
    } else {
        draw(&p, rng)
    };
    Ok((p, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critics::ClosureQ;
    use crate::rng::stream;

    fn linear_q() -> ClosureQ<impl Fn(&[Real], &[Real]) -> Real + Sync, impl Fn(&[Real], &[Real]) -> Vec<Real> + Sync> {
        ClosureQ { d_state: 1, d_action: 1, q: |_: &[Real], a: &[Real]| a[0], grad: |_: &[Real], _: &[Real]| vec![1.0] }
    }

    fn quad(center: Real) -> ClosureQ<impl Fn(&[Real], &[Real]) -> Real + Sync, impl Fn(&[Real], &[Real]) -> Vec<Real> + Sync> {
        ClosureQ {
            d_state: 1,
            d_action: 1,
            q: move |_: &[Real], a: &[Real]| -(a[0] - center).powi(2),
            grad: move |_: &[Real], a: &[Real]| vec![-2.0 * (a[0] - center)],
        }
    }

    #[test]
    fn top_two_of_three() {
        let set = rank_candidates(&linear_q(), &[0.0], &[-0.5, 0.2, 0.9], None, 2).unwrap();
        assert_eq!(set.actions, vec![0.9, 0.2]);
        assert_eq!(set.q_values, vec![0.9, 0.2]);
    }

    #[test]
    fn ties_prefer_earlier_and_nan_last() {
        assert_eq!(ranking(&[1.0, Real::NAN, 1.0, 2.0]), vec![3, 0, 2, 1]);
    }

    #[test]
    fn one_quadratic_step() {
        let cfg = ActionOptConfig { n_grad_steps: 1, step_size: 0.1, ..Default::default() };
        let set = rank_candidates(&quad(0.3), &[0.0], &[0.0], None, 1).unwrap();
        let (out, stats) = local_optimize(&quad(0.3), set, &cfg).unwrap();
        assert!((out.actions[0] - 0.06).abs() < 1e-15);
        assert_eq!(stats.accepted_steps, 1);
    }

    #[test]
    fn stationary_point_stops() {
        let cfg = ActionOptConfig { n_grad_steps: 10, step_size: 0.1, ..Default::default() };
        let set = rank_candidates(&quad(0.0), &[0.0], &[0.0], None, 1).unwrap();
        let (out, stats) = local_optimize(&quad(0.0), set, &cfg).unwrap();
        assert_eq!(out.actions, vec![0.0]);
        assert_eq!(stats.accepted_steps, 0);
        assert_eq!(stats.rejected_steps, 1);
    }

    #[test]
    fn zero_steps_is_identity() {
        let cfg = ActionOptConfig { n_grad_steps: 0, ..Default::default() };
        let set = rank_candidates(&quad(0.3), &[0.0], &[0.5, -0.2, 0.1], None, 3).unwrap();
        let (out, _) = local_optimize(&quad(0.3), set.clone(), &cfg).unwrap();
        assert_eq!(out, set);
    }

    #[test]
    fn dataset_action_survives_when_best() {
        let set = rank_candidates(&linear_q(), &[0.0], &[-0.5, 0.2, 0.1], Some(&[0.95]), 2).unwrap();
        assert_eq!(set.actions[0], 0.95);
        assert_eq!(set.provenance[0], Provenance::DatasetAction);
    }

    #[test]
    fn selection_rules() {
        let set = ActionCandidateSet {
            state: vec![0.0],
            actions: vec![0.1, 0.2],
            q_values: vec![2.0, 1.0],
            provenance: vec![Provenance::PolicySample; 2],
            d_action: 1,
        };
        let (p, c) = optimized_policy(&set, Selection::Argmax, &mut stream(1, &[])).unwrap();
        assert_eq!(c, 0);
        assert!((p[0] - 0.7310585786300049).abs() < 1e-12);
        // std of {2, 1} is 0.5: above 0.1 so auto samples, below 1.0 so auto takes argmax
        assert!(!uses_argmax(Selection::Auto { threshold: 0.1 }, &set.q_values));
        assert!(uses_argmax(Selection::Auto { threshold: 1.0 }, &set.q_values));
        assert!(uses_argmax(Selection::Auto { threshold: 0.1 }, &[-1.0, -1.02, -1.04]));
    }

    #[test]
    fn config_validation() {
        assert!(ActionOptConfig::default().validate().is_ok());
        assert!(ActionOptConfig { top_m: 33, ..Default::default() }.validate().is_err());
        assert!(ActionOptConfig { top_m: 33, include_dataset_action: true, ..Default::default() }.validate().is_ok());
        assert!(ActionOptConfig { step_size: 0.0, ..Default::default() }.validate().is_err());
    }
}
