use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ensemble::{CriticEnsemble, CriticHead, QFunction};
use crate::action_opt::ActionCandidateSet;
use crate::env::Transition;
use crate::error::{Error, Result};
use crate::numerics::{expectile_grad, expectile_loss, Activation, AdamConfig, Checkpoint, Normalizer};
use crate::{Adam, Mlp, Params, Real};

/// A training minibatch in row-major arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub states: Vec<Real>,
    pub actions: Vec<Real>,
    pub rewards: Vec<Real>,
    pub next_states: Vec<Real>,
    /// 1 where the transition ends in the goal.
    pub dones: Vec<Real>,
    pub mc_returns: Vec<Real>,
    pub d_state: usize,
    pub d_action: usize,
}

impl Batch {
    pub fn from_transitions<'a>(items: impl IntoIterator<Item = &'a Transition>) -> Self {
        let mut b = Batch::default();
        for t in items {
            b.d_state = t.state.len();
            b.d_action = t.action.len();
            b.states.extend_from_slice(&t.state);
            b.actions.extend_from_slice(&t.action);
            b.rewards.push(t.reward);
            b.next_states.extend_from_slice(&t.next_state);
            b.dones.push(if t.done { 1.0 } else { 0.0 });
            b.mc_returns.push(t.mc_return);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, i: usize) -> &[Real] {
        &self.states[i * self.d_state..(i + 1) * self.d_state]
    }

    pub fn next_state(&self, i: usize) -> &[Real] {
        &self.next_states[i * self.d_state..(i + 1) * self.d_state]
    }

    pub fn action(&self, i: usize) -> &[Real] {
        &self.actions[i * self.d_action..(i + 1) * self.d_action]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackupMode {
    /// Mean of the target Q over the softmax policy on the candidates.
    Expectation,
    /// Max of the target Q over the candidates.
    #[default]
    Max,
}

/// Which actions populate the candidate sets used by the critic loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BellmanActions {
    #[default]
    Optimized,
    Base,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalQlConfig {
    pub cql_alpha: Real,
    pub backup_mode: BackupMode,
    pub discount: Real,
}

impl Default for CalQlConfig {
    fn default() -> Self {
        CalQlConfig { cql_alpha: 0.005, backup_mode: BackupMode::Max, discount: 0.99 }
    }
}

impl CalQlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cql_alpha >= 0.0) {
            return Err(Error::Config("cql_alpha must be non-negative".into()));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1)", self.discount)));
        }
        Ok(())
    }
}

/// Summary of one critic loss evaluation, averaged over ensemble members.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CriticReport {
    pub loss: Real,
    pub td_loss: Real,
    /// `E_pi[max(Q, mc)] - E_D[Q]` before scaling by alpha.
    pub conservative_term: Real,
    pub mean_q: Real,
    pub value_loss: Real,
}

fn check_sets(batch: &Batch, sets: &[ActionCandidateSet], what: &str) -> Result<()> {
    if sets.len() != batch.len() || sets.iter().any(|s| s.is_empty()) {
        return Err(Error::Contract(format!(
            "{what}: {} non-empty candidate sets required, got {}",
            batch.len(),
            sets.len()
        )));
    }
    Ok(())
}

/// Bellman targets `r + gamma * (1 - done) * backup(Qbar(s', .))` over the next-state candidates.
pub fn td_targets<Q: QFunction + ?Sized>(
    target: &Q,
    batch: &Batch,
    next_sets: &[ActionCandidateSet],
    backup: BackupMode,
    discount: Real,
) -> Result<Vec<Real>> {
    check_sets(batch, next_sets, "td targets")?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    for (i, set) in next_sets.iter().enumerate() {
        for c in 0..set.len() {
            states.extend_from_slice(batch.next_state(i));
            actions.extend_from_slice(set.action(c));
        }
    }
    let q = target.q_rows(&states, &actions)?;
    let mut y = Vec::with_capacity(batch.len());
    let mut offset = 0;
    for (i, set) in next_sets.iter().enumerate() {
        let qs = &q[offset..offset + set.len()];
        offset += set.len();
        let v = match backup {
            BackupMode::Max => qs.iter().copied().fold(Real::NEG_INFINITY, Real::max),
            BackupMode::Expectation => set.probabilities().iter().zip(qs).map(|(p, q)| p * q).sum(),
        };
        y.push(batch.rewards[i] + discount * (1.0 - batch.dones[i]) * v);
    }
    Ok(y)
}

/// Regression of one member toward `y` on the dataset rows, plus an optional conservative
/// term on extra candidate rows. Returns (td loss, conservative term, mean Q, grads).
fn member_loss(
    critic: &CriticEnsemble,
    net: &Mlp,
    batch: &Batch,
    y: &[Real],
    conservative: Option<(&[ActionCandidateSet], Real)>,
    half_mse: bool,
) -> Result<(Real, Real, Real, Params)> {
    let n = batch.len();
    let mut states = batch.states.clone();
    let mut actions = batch.actions.clone();
    if let Some((sets, _)) = conservative {
        for (i, set) in sets.iter().enumerate() {
            for c in 0..set.len() {
                states.extend_from_slice(batch.state(i));
                actions.extend_from_slice(set.action(c));
            }
        }
    }
    let rows = actions.len() / batch.d_action;
    let inputs = critic.inputs(&states, &actions)?;
    let eval = critic.net_eval(net, &inputs, rows)?;
    let nf = n as Real;
    let mut dq = vec![0.0; rows];
    let mut td = 0.0;
    let mut extra = Vec::new();
    match &critic.head {
        CriticHead::Scalar => {
            let k = if half_mse { 1.0 } else { 2.0 };
            for i in 0..n {
                let u = eval.q[i] - y[i];
                td += if half_mse { 0.5 * u * u } else { u * u } / nf;
                dq[i] = k * u / nf;
            }
        }
        CriticHead::HlGauss(h) => {
            let nb = h.n_bins;
            extra = vec![0.0; rows * nb];
            for i in 0..n {
                let target = h.targets(y[i]);
                let p = &eval.probs[i];
                for j in 0..nb {
                    if target[j] > 0.0 {
                        td -= target[j] * p[j].max(Real::MIN_POSITIVE).ln() / nf;
                    }
                    extra[i * nb + j] = (p[j] - target[j]) / nf;
                }
            }
        }
    }
    let mean_q = eval.q[..n].iter().sum::<Real>() / nf;
    let mut cons = 0.0;
    if let Some((sets, alpha)) = conservative {
        let mut r = n;
        let mut pi_term = 0.0;
        for (i, set) in sets.iter().enumerate() {
            let floor = batch.mc_returns[i];
            for (c, p) in set.probabilities().into_iter().enumerate() {
                let q = eval.q[r + c];
                pi_term += p * q.max(floor) / nf;
                if q > floor {
                    dq[r + c] += alpha * p / nf;
                }
            }
            r += set.len();
        }
        cons = pi_term - mean_q;
        dq[..n].iter_mut().for_each(|g| *g -= alpha / nf);
    }
    let mut og = critic.output_grad(&eval, &dq);
    for (o, e) in og.iter_mut().zip(&extra) {
        *o += e;
    }
    let (grads, _) = net.backward_trace(&eval.trace, &og)?;
    Ok((td, cons, mean_q, grads))
}

fn aggregate(parts: Vec<(Real, Real, Real, Params)>, alpha: Real) -> (CriticReport, Vec<Params>) {
    let m = parts.len() as Real;
    let mut report = CriticReport::default();
    let mut grads = Vec::with_capacity(parts.len());
    for (td, cons, q, g) in parts {
        report.td_loss += td / m;
        report.conservative_term += cons / m;
        report.mean_q += q / m;
        grads.push(g);
    }
    report.loss = report.td_loss + alpha * report.conservative_term;
    (report, grads)
}

/// Calibrated conservative loss for every member. `sets[i]` are candidates at `s_i` for the
/// conservative term, `next_sets[i]` candidates at `s'_i` for the Bellman target.
pub fn calql_loss<R: Rng + ?Sized>(
    critic: &CriticEnsemble,
    config: &CalQlConfig,
    batch: &Batch,
    sets: &[ActionCandidateSet],
    next_sets: &[ActionCandidateSet],
    rng: &mut R,
) -> Result<(CriticReport, Vec<Params>)> {
    check_sets(batch, sets, "calql conservative term")?;
    let target = critic.target_subset(rng);
    let y = td_targets(&target, batch, next_sets, config.backup_mode, config.discount)?;
    let parts = critic
        .members
        .iter()
        .map(|net| member_loss(critic, net, batch, &y, Some((sets, config.cql_alpha)), true))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(parts, config.cql_alpha))
}

/// Plain Bellman regression with ensemble-min targets over next-state candidates.
pub fn td_loss_hybrid<R: Rng + ?Sized>(
    critic: &CriticEnsemble,
    batch: &Batch,
    next_sets: &[ActionCandidateSet],
    backup: BackupMode,
    discount: Real,
    rng: &mut R,
) -> Result<(CriticReport, Vec<Params>)> {
    let target = critic.target_subset(rng);
    let y = td_targets(&target, batch, next_sets, backup, discount)?;
    let parts = critic
        .members
        .iter()
        .map(|net| member_loss(critic, net, batch, &y, None, true))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(parts, 0.0))
}

/// State-value network for expectile regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub net: Mlp,
    pub expectile: Real,
    pub normalizer: Normalizer<Real>,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(
        hidden: &[usize],
        activation: Activation,
        expectile: Real,
        normalizer: Normalizer<Real>,
        rng: &mut R,
    ) -> Result<Self> {
        if !(expectile > 0.0 && expectile < 1.0) {
            return Err(Error::Config(format!("expectile {expectile} outside (0, 1)")));
        }
        let mut dims = vec![normalizer.dim()];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(ValueNet { net: Mlp::new(&dims, activation, rng), expectile, normalizer })
    }

    fn inputs(&self, states: &[Real]) -> Vec<Real> {
        let mut out = Vec::with_capacity(states.len());
        for s in states.chunks(self.normalizer.dim()) {
            self.normalizer.apply_into(s, &mut out);
        }
        out
    }

    pub fn values(&self, states: &[Real]) -> Result<Vec<Real>> {
        let x = self.inputs(states);
        self.net.forward_rows(&x, states.len() / self.normalizer.dim())
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.push_scalar(format!("{prefix}.expectile"), self.expectile);
        ckpt.push(format!("{prefix}.norm.shift"), vec![self.normalizer.dim()], self.normalizer.shift.clone());
        ckpt.push(format!("{prefix}.norm.scale"), vec![self.normalizer.dim()], self.normalizer.scale.clone());
        ckpt.push_mlp(&format!("{prefix}.net"), &self.net);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        Ok(ValueNet {
            net: ckpt.read_mlp(&format!("{prefix}.net"))?,
            expectile: ckpt.scalar(&format!("{prefix}.expectile"))?,
            normalizer: Normalizer {
                shift: ckpt.require(&format!("{prefix}.norm.shift"))?.data.clone(),
                scale: ckpt.require(&format!("{prefix}.norm.scale"))?.data.clone(),
            },
        })
    }
}

/// Expectile value loss against target-Q at dataset actions, and squared-error critic
/// losses against `r + gamma * (1 - done) * V(s')`.
pub fn iql_losses<R: Rng + ?Sized>(
    critic: &CriticEnsemble,
    value: &ValueNet,
    batch: &Batch,
    discount: Real,
    rng: &mut R,
) -> Result<(CriticReport, Params, Vec<Params>)> {
    let n = batch.len();
    let nf = n as Real;
    let q_target = critic.target_subset(rng).q_rows(&batch.states, &batch.actions)?;
    let x = value.inputs(&batch.states);
    let trace = value.net.trace(&x, n)?;
    let v = trace.output();
    let mut value_loss = 0.0;
    let mut dv = vec![0.0; n];
    for i in 0..n {
        let u = q_target[i] - v[i];
        value_loss += expectile_loss(u, value.expectile) / nf;
        dv[i] = -expectile_grad(u, value.expectile) / nf;
    }
    let (value_grads, _) = value.net.backward_trace(&trace, &dv)?;
    let v_next = value.values(&batch.next_states)?;
    let y: Vec<Real> = (0..n)
        .map(|i| batch.rewards[i] + discount * (1.0 - batch.dones[i]) * v_next[i])
        .collect();
    let parts = critic
        .members
        .iter()
        .map(|net| member_loss(critic, net, batch, &y, None, false))
        .collect::<Result<Vec<_>>>()?;
    let (mut report, grads) = aggregate(parts, 0.0);
    report.value_loss = value_loss;
    report.loss += value_loss;
    Ok((report, value_grads, grads))
}

/// Adam state for every ensemble member (and the value net when present).
#[derive(Debug, Clone)]
pub struct CriticOptimizer {
    members: Vec<Adam>,
    value: Option<Adam>,
}

impl CriticOptimizer {
    pub fn new(critic: &CriticEnsemble, value: Option<&ValueNet>, config: AdamConfig) -> Self {
        CriticOptimizer {
            members: critic.members.iter().map(|m| Adam::new(m, config.clone())).collect(),
            value: value.map(|v| Adam::new(&v.net, config.clone())),
        }
    }

    /// Applies member gradients, then moves the targets.
    pub fn apply(&mut self, critic: &mut CriticEnsemble, grads: &[Params]) -> Result<()> {
        if grads.len() != critic.members.len() {
            return Err(Error::Contract("one gradient per ensemble member required".into()));
        }
        for ((adam, net), g) in self.members.iter_mut().zip(critic.members.iter_mut()).zip(grads) {
            adam.step(net, g)?;
        }
        critic.polyak_update();
        Ok(())
    }

    pub fn apply_value(&mut self, value: &mut ValueNet, grads: &Params) -> Result<()> {
        let adam = self
            .value
            .as_mut()
            .ok_or_else(|| Error::Contract("optimizer built without a value network".into()))?;
        adam.step(&mut value.net, grads)
    }
}
