use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::{Mlp, Params, Real};

pub const ATANH_CLIP: Real = 1e-6;
const HALF_LN_2PI: Real = 0.918_938_533_204_672_7;

/// Diagonal Gaussian squashed through `tanh`. The network emits `[mean, log_std]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub d_state: usize,
    pub d_action: usize,
    pub log_std_min: Real,
    pub log_std_max: Real,
}

impl GaussianPolicy {
    fn log_std(&self, raw: Real) -> Real {
        raw.clamp(self.log_std_min, self.log_std_max)
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &[Real], k: usize, rng: &mut R) -> Result<Vec<Real>> {
        let out = self.net.forward_rows(state, 1)?;
        let (mean, raw) = out.split_at(self.d_action);
        let mut actions = Vec::with_capacity(k * self.d_action);
        for _ in 0..k {
            for (m, &r) in mean.iter().zip(raw) {
                let z: Real = rng.sample(StandardNormal);
                actions.push((m + self.log_std(r).exp() * z).tanh().clamp(-1.0, 1.0));
            }
        }
        Ok(actions)
    }

    /// Mean action `tanh(mean)` at one state.
    pub fn mode(&self, state: &[Real]) -> Result<Vec<Real>> {
        let out = self.net.forward_rows(state, 1)?;
        Ok(out[..self.d_action].iter().map(|m| m.tanh()).collect())
    }

    /// Per-example NLL terms and their gradients with respect to the network outputs.
    fn nll(&self, out: &[Real], actions: &[Real]) -> Result<(Vec<Real>, Vec<Real>)> {
        let da = self.d_action;
        let n = actions.len() / da;
        let mut losses = Vec::with_capacity(n);
        let mut grads = vec![0.0; n * 2 * da];
        for i in 0..n {
            let o = &out[i * 2 * da..(i + 1) * 2 * da];
            let mut l = 0.0;
            for j in 0..da {
                let a = actions[i * da + j];
                if !(a.abs() <= 1.0) {
                    return Err(Error::Domain(format!("action component {a} outside [-1, 1]")));
                }
                let a = a.clamp(-1.0 + ATANH_CLIP, 1.0 - ATANH_CLIP);
                let u = a.atanh();
                let mu = o[j];
                let ls = self.log_std(o[da + j]);
                let sigma = ls.exp();
                let z = (u - mu) / sigma;
                l += 0.5 * z * z + ls + HALF_LN_2PI + (1.0 - a * a).ln();
                grads[i * 2 * da + j] = -z / sigma;
                if o[da + j] > self.log_std_min && o[da + j] < self.log_std_max {
                    grads[i * 2 * da + da + j] = 1.0 - z * z;
                }
            }
            losses.push(l);
        }
        Ok((losses, grads))
    }

    pub fn loss(&self, states: &[Real], actions: &[Real], weights: Option<&[Real]>) -> Result<Real> {
        let n = actions.len() / self.d_action;
        let out = self.net.forward_rows(states, n)?;
        let (losses, _) = self.nll(&out, actions)?;
        Ok(weighted_mean(&losses, weights))
    }

    pub fn loss_and_grad(&self, states: &[Real], actions: &[Real], weights: Option<&[Real]>) -> Result<(Real, Params)> {
        let n = actions.len() / self.d_action;
        let trace = self.net.trace(states, n)?;
        let (losses, mut grads) = self.nll(trace.output(), actions)?;
        let den: Real = weights.map_or(n as Real, |w| w.iter().sum());
        if den <= 0.0 {
            return Ok((0.0, Params::zeros_like(self.net.params())));
        }
        for (i, row) in grads.chunks_mut(2 * self.d_action).enumerate() {
            let w = weights.map_or(1.0, |w| w[i]) / den;
            row.iter_mut().for_each(|g| *g *= w);
        }
        let (g, _) = self.net.backward_trace(&trace, &grads)?;
        Ok((weighted_mean(&losses, weights), g))
    }
}

/// `sum(w * l) / sum(w)`, or 0 when the weights sum to zero.
pub fn weighted_mean(losses: &[Real], weights: Option<&[Real]>) -> Real {
    match weights {
        None if losses.is_empty() => 0.0,
        None => losses.iter().sum::<Real>() / losses.len() as Real,
        Some(w) => {
            let den: Real = w.iter().sum();
            if den <= 0.0 {
                0.0
            } else {
                losses.iter().zip(w).map(|(l, w)| l * w).sum::<Real>() / den
            }
        }
    }
}
