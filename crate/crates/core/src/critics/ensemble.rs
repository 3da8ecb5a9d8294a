use rand::seq::index::sample;
use rand::Rng;

use super::head::HlGaussHead;
use crate::error::{Error, Result};
use crate::numerics::{Activation, Checkpoint, Normalizer};
use crate::{Mlp, Real};

/// Anything that scores `(state, action)` rows and differentiates with respect to the action.
pub trait QFunction: Sync {
    fn d_state(&self) -> usize;
    fn d_action(&self) -> usize;

    /// Q for row-aligned states and actions.
    fn q_rows(&self, states: &[Real], actions: &[Real]) -> Result<Vec<Real>>;

    /// Q and dQ/da for row-aligned states and actions.
    fn q_grad_rows(&self, states: &[Real], actions: &[Real]) -> Result<(Vec<Real>, Vec<Real>)>;

    /// Q for several actions at one state.
    fn q_at(&self, state: &[Real], actions: &[Real]) -> Result<Vec<Real>> {
        self.q_rows(&state.repeat(actions.len() / self.d_action()), actions)
    }

    fn q_grad_at(&self, state: &[Real], actions: &[Real]) -> Result<(Vec<Real>, Vec<Real>)> {
        self.q_grad_rows(&state.repeat(actions.len() / self.d_action()), actions)
    }
}

/// Q defined by closures, for tests and probes.
pub struct ClosureQ<F, G> {
    pub d_state: usize,
    pub d_action: usize,
    pub q: F,
    pub grad: G,
}

impl<F, G> QFunction for ClosureQ<F, G>
where
    F: Fn(&[Real], &[Real]) -> Real + Sync,
    G: Fn(&[Real], &[Real]) -> Vec<Real> + Sync,
{
    fn d_state(&self) -> usize {
        self.d_state
    }

    fn d_action(&self) -> usize {
        self.d_action
    }

    fn q_rows(&self, states: &[Real], actions: &[Real]) -> Result<Vec<Real>> {
        Ok(states
            .chunks(self.d_state)
            .zip(actions.chunks(self.d_action))
            .map(|(s, a)| (self.q)(s, a))
            .collect())
    }

    fn q_grad_rows(&self, states: &[Real], actions: &[Real]) -> Result<(Vec<Real>, Vec<Real>)> {
        let q = self.q_rows(states, actions)?;
        let g = states
            .chunks(self.d_state)
            .zip(actions.chunks(self.d_action))
            .flat_map(|(s, a)| (self.grad)(s, a))
            .collect();
        Ok((q, g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CriticHead {
    Scalar,
    HlGauss(HlGaussHead),
}

impl CriticHead {
    pub fn outputs(&self) -> usize {
        match self {
            CriticHead::Scalar => 1,
            CriticHead::HlGauss(h) => h.n_bins,
        }
    }
}

/// Ensemble of Q networks with target copies. Networks read `[normalized state, action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticEnsemble {
    pub members: Vec<Mlp>,
    pub targets: Vec<Mlp>,
    pub subsample_size: usize,
    pub head: CriticHead,
    pub polyak_tau: Real,
    pub normalizer: Normalizer<Real>,
    pub d_action: usize,
}

/// Output of one member on a batch of rows, kept for the reverse pass.
pub struct MemberEval {
    pub trace: crate::numerics::Trace<Real>,
    pub q: Vec<Real>,
    /// Per-row softmax probabilities (distributional head only).
    pub probs: Vec<Vec<Real>>,
}

impl CriticEnsemble {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        d_state: usize,
        d_action: usize,
        hidden: &[usize],
        activation: Activation,
        ensemble_size: usize,
        subsample_size: usize,
        head: CriticHead,
        polyak_tau: Real,
        normalizer: Normalizer<Real>,
        rng: &mut R,
    ) -> Result<Self> {
        if ensemble_size == 0 || subsample_size == 0 || subsample_size > ensemble_size {
            return Err(Error::Config(format!(
                "subsample size {subsample_size} must lie in 1..={ensemble_size} (ensemble size)"
            )));
        }
        if !(0.0..=1.0).contains(&polyak_tau) {
            return Err(Error::Config(format!("polyak tau {polyak_tau} outside [0, 1]")));
        }
        if normalizer.dim() != d_state {
            return Err(Error::Dimension("critic normalizer does not match d_state".into()));
        }
        let mut dims = vec![d_state + d_action];
        dims.extend_from_slice(hidden);
        dims.push(head.outputs());
        let members: Vec<Mlp> = (0..ensemble_size).map(|_| Mlp::new(&dims, activation, rng)).collect();
        Ok(CriticEnsemble {
            targets: members.clone(),
            members,
            subsample_size,
            head,
            polyak_tau,
            normalizer,
            d_action,
        })
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    pub fn d_state(&self) -> usize {
        self.normalizer.dim()
    }

    /// Network input rows `[normalized state, action]`.
    pub fn inputs(&self, states: &[Real], actions: &[Real]) -> Result<Vec<Real>> {
        let (ds, da) = (self.d_state(), self.d_action);
        let n = actions.len() / da;
        if actions.len() != n * da || states.len() != n * ds {
            return Err(Error::Dimension(format!(
                "{} state values and {} action values are not row aligned",
                states.len(),
                actions.len()
            )));
        }
        let mut out = Vec::with_capacity(n * (ds + da));
        for (s, a) in states.chunks(ds).zip(actions.chunks(da)) {
            self.normalizer.apply_into(s, &mut out);
            out.extend_from_slice(a);
        }
        Ok(out)
    }

    fn reduce(&self, raw: &[Real], rows: usize) -> (Vec<Real>, Vec<Vec<Real>>) {
        match &self.head {
            CriticHead::Scalar => (raw.to_vec(), Vec::new()),
            CriticHead::HlGauss(h) => {
                let mut q = Vec::with_capacity(rows);
                let mut probs = Vec::with_capacity(rows);
                for row in raw.chunks(h.n_bins) {
                    let (v, p) = h.value(row);
                    q.push(v);
                    probs.push(p);
                }
                (q, probs)
            }
        }
    }

    /// Q of one network on prepared input rows.
    pub fn net_q(&self, net: &Mlp, inputs: &[Real], rows: usize) -> Result<Vec<Real>> {
        let raw = net.forward_rows(inputs, rows)?;
        Ok(self.reduce(&raw, rows).0)
    }

    pub fn net_eval(&self, net: &Mlp, inputs: &[Real], rows: usize) -> Result<MemberEval> {
        let trace = net.trace(inputs, rows)?;
        let (q, probs) = self.reduce(trace.output(), rows);
        Ok(MemberEval { trace, q, probs })
    }

    /// Converts dLoss/dQ per row into dLoss/d(network output).
    pub fn output_grad(&self, eval: &MemberEval, dq: &[Real]) -> Vec<Real> {
        match &self.head {
            CriticHead::Scalar => dq.to_vec(),
            CriticHead::HlGauss(h) => eval
                .q
                .iter()
                .zip(&eval.probs)
                .zip(dq)
                .flat_map(|((&q, p), &g)| h.value_grad(q, p).into_iter().map(move |v| v * g))
                .collect(),
        }
    }

    /// Indices of a random member subset, or all members when the subset is the whole ensemble.
    pub fn subsample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        if self.subsample_size >= self.members.len() {
            (0..self.members.len()).collect()
        } else {
            let mut idx = sample(rng, self.members.len(), self.subsample_size).into_vec();
            idx.sort_unstable();
            idx
        }
    }

    /// Min over all online members.
    pub fn online(&self) -> EnsembleView<'_> {
        EnsembleView { critic: self, members: (0..self.members.len()).collect(), target: false }
    }

    pub fn online_subset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnsembleView<'_> {
        EnsembleView { critic: self, members: self.subsample(rng), target: false }
    }

    pub fn target_subset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnsembleView<'_> {
        EnsembleView { critic: self, members: self.subsample(rng), target: true }
    }

    pub fn view(&self, members: Vec<usize>, target: bool) -> EnsembleView<'_> {
        EnsembleView { critic: self, members, target }
    }

    /// `targets <- (1 - tau) * targets + tau * members`.
    pub fn polyak_update(&mut self) {
        let tau = self.polyak_tau;
        for (t, m) in self.targets.iter_mut().zip(&self.members) {
            t.params_mut().lerp_toward(m.params(), tau);
        }
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.push_scalar(format!("{prefix}.subsample"), self.subsample_size as f64);
        ckpt.push_scalar(format!("{prefix}.tau"), self.polyak_tau);
        ckpt.push_scalar(format!("{prefix}.d_action"), self.d_action as f64);
        ckpt.push(format!("{prefix}.norm.shift"), vec![self.d_state()], self.normalizer.shift.clone());
        ckpt.push(format!("{prefix}.norm.scale"), vec![self.d_state()], self.normalizer.scale.clone());
        if let CriticHead::HlGauss(h) = &self.head {
            ckpt.push(format!("{prefix}.hl_gauss"), vec![4], vec![h.n_bins as f64, h.v_min, h.v_max, h.sigma]);
        }
        ckpt.push_scalar(format!("{prefix}.size"), self.members.len() as f64);
        for (i, (m, t)) in self.members.iter().zip(&self.targets).enumerate() {
            ckpt.push_mlp(&format!("{prefix}.member{i}"), m);
            ckpt.push_mlp(&format!("{prefix}.target{i}"), t);
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let size = ckpt.scalar(&format!("{prefix}.size"))? as usize;
        let head = match ckpt.get(&format!("{prefix}.hl_gauss")) {
            Some(r) if r.data.len() == 4 => CriticHead::HlGauss(HlGaussHead {
                n_bins: r.data[0] as usize,
                v_min: r.data[1],
                v_max: r.data[2],
                sigma: r.data[3],
            }),
            Some(_) => return Err(Error::Format("malformed hl_gauss record".into())),
            None => CriticHead::Scalar,
        };
        let mut members = Vec::with_capacity(size);
        let mut targets = Vec::with_capacity(size);
        for i in 0..size {
            members.push(ckpt.read_mlp(&format!("{prefix}.member{i}"))?);
            targets.push(ckpt.read_mlp(&format!("{prefix}.target{i}"))?);
        }
        Ok(CriticEnsemble {
            members,
            targets,
            subsample_size: ckpt.scalar(&format!("{prefix}.subsample"))? as usize,
            head,
            polyak_tau: ckpt.scalar(&format!("{prefix}.tau"))?,
            normalizer: Normalizer {
                shift: ckpt.require(&format!("{prefix}.norm.shift"))?.data.clone(),
                scale: ckpt.require(&format!("{prefix}.norm.scale"))?.data.clone(),
            },
            d_action: ckpt.scalar(&format!("{prefix}.d_action"))? as usize,
        })
    }
}

/// Min-reduction over a fixed subset of online or target networks.
#[derive(Debug, Clone)]
pub struct EnsembleView<'a> {
    critic: &'a CriticEnsemble,
    members: Vec<usize>,
    target: bool,
}

impl EnsembleView<'_> {
    fn nets(&self) -> impl Iterator<Item = &Mlp> {
        let pool = if self.target { &self.critic.targets } else { &self.critic.members };
        self.members.iter().map(move |&i| &pool[i])
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }
}

impl QFunction for EnsembleView<'_> {
    fn d_state(&self) -> usize {
        self.critic.d_state()
    }

    fn d_action(&self) -> usize {
        self.critic.d_action
    }

    fn q_rows(&self, states: &[Real], actions: &[Real]) -> Result<Vec<Real>> {
        let rows = actions.len() / self.critic.d_action;
        let inputs = self.critic.inputs(states, actions)?;
        let mut best = vec![Real::INFINITY; rows];
        for net in self.nets() {
            for (b, q) in best.iter_mut().zip(self.critic.net_q(net, &inputs, rows)?) {
                // NaN propagates so callers can see a broken network
                if q < *b || q.is_nan() {
                    *b = q;
                }
            }
        }
        Ok(best)
    }

    fn q_grad_rows(&self, states: &[Real], actions: &[Real]) -> Result<(Vec<Real>, Vec<Real>)> {
        let da = self.critic.d_action;
        let ds = self.critic.d_state();
        let rows = actions.len() / da;
        let inputs = self.critic.inputs(states, actions)?;
        let mut best = vec![Real::INFINITY; rows];
        let mut grad = vec![0.0; rows * da];
        let ones = vec![1.0; rows];
        for net in self.nets() {
            let eval = self.critic.net_eval(net, &inputs, rows)?;
            let og = self.critic.output_grad(&eval, &ones);
            let dx = net.input_grad_trace(&eval.trace, &og)?;
            for r in 0..rows {
                let q = eval.q[r];
                if q < best[r] || q.is_nan() {
                    best[r] = q;
                    grad[r * da..(r + 1) * da].copy_from_slice(&dx[r * (ds + da) + ds..(r + 1) * (ds + da)]);
                }
            }
        }
        Ok((best, grad))
    }
}
