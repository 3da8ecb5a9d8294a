use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gaussian::weighted_mean;
use crate::error::{Error, Result};
use crate::numerics::{logsumexp, softmax};
use crate::{Mlp, Params, Real};

pub const DEFAULT_BINS: usize = 128;

/// Uniform per-dimension discretization of `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub n_bins: usize,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        TokenizerSpec { n_bins: DEFAULT_BINS }
    }
}

impl TokenizerSpec {
    pub fn tokenize(&self, a: Real) -> Result<usize> {
        if !(a.abs() <= 1.0) {
            return Err(Error::Tokenization(a));
        }
        let j = ((a + 1.0) * 0.5 * self.n_bins as Real).floor() as usize;
        Ok(j.min(self.n_bins - 1))
    }

    /// Center of bin `j`.
    pub fn detokenize(&self, j: usize) -> Real {
        -1.0 + (j as Real + 0.5) * 2.0 / self.n_bins as Real
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArSampleMode {
    #[default]
    Sample,
    Greedy,
}

/// Categorical policy factored over action dimensions. One network scores every
/// dimension; its input is `[state, one-hot dimension, one-hot prefix tokens]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArPolicy {
    pub net: Mlp,
    pub tokenizer: TokenizerSpec,
    pub d_state: usize,
    pub d_action: usize,
    pub mode: ArSampleMode,
}

pub fn input_width(d_state: usize, d_action: usize, n_bins: usize) -> usize {
    d_state + d_action + d_action * n_bins
}

impl ArPolicy {
    fn width(&self) -> usize {
        input_width(self.d_state, self.d_action, self.tokenizer.n_bins)
    }

    fn push_row(&self, out: &mut Vec<Real>, state: &[Real], dim: usize, prefix: &[usize]) {
        let n = self.tokenizer.n_bins;
        let base = out.len();
        out.extend_from_slice(state);
        out.resize(base + self.width(), 0.0);
        out[base + self.d_state + dim] = 1.0;
        let tok = base + self.d_state + self.d_action;
        for (i, &t) in prefix.iter().enumerate() {
            out[tok + i * n + t] = 1.0;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &[Real], k: usize, rng: &mut R) -> Result<Vec<Real>> {
        self.sample_with(state, k, self.mode, rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        state: &[Real],
        k: usize,
        mode: ArSampleMode,
        rng: &mut R,
    ) -> Result<Vec<Real>> {
        let n = self.tokenizer.n_bins;
        let mut tokens = vec![Vec::with_capacity(self.d_action); k];
        let mut inputs = Vec::with_capacity(k * self.width());
        for dim in 0..self.d_action {
            inputs.clear();
            for prefix in &tokens {
                self.push_row(&mut inputs, state, dim, prefix);
            }
            let logits = self.net.forward_rows(&inputs, k)?;
            for (r, prefix) in tokens.iter_mut().enumerate() {
                let row = &logits[r * n..(r + 1) * n];
                let tok = match mode {
                    ArSampleMode::Greedy => argmax(row),
                    ArSampleMode::Sample => draw(&softmax(row), rng),
                };
                prefix.push(tok);
            }
        }
        Ok(tokens.iter().flatten().map(|&t| self.tokenizer.detokenize(t)).collect())
    }

    fn teacher_forced(&self, states: &[Real], actions: &[Real]) -> Result<(Vec<Real>, Vec<usize>)> {
        let n = actions.len() / self.d_action;
        let mut inputs = Vec::with_capacity(n * self.d_action * self.width());
        let mut targets = Vec::with_capacity(n * self.d_action);
        for i in 0..n {
            let toks = actions[i * self.d_action..(i + 1) * self.d_action]
                .iter()
                .map(|&a| self.tokenizer.tokenize(a))
                .collect::<Result<Vec<_>>>()?;
            let s = &states[i * self.d_state..(i + 1) * self.d_state];
            for dim in 0..self.d_action {
                self.push_row(&mut inputs, s, dim, &toks[..dim]);
                targets.push(toks[dim]);
            }
        }
        Ok((inputs, targets))
    }

    /// Per-example cross-entropy averaged over dimensions, from raw logits.
    fn cross_entropy(&self, logits: &[Real], targets: &[usize]) -> (Vec<Real>, Vec<Real>) {
        let n_bins = self.tokenizer.n_bins;
        let d = self.d_action;
        let mut losses = vec![0.0; targets.len() / d];
        let mut grads = vec![0.0; logits.len()];
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits[r * n_bins..(r + 1) * n_bins];
            let p = softmax(row);
            losses[r / d] += (logsumexp(row) - row[t]) / d as Real;
            let g = &mut grads[r * n_bins..(r + 1) * n_bins];
            g.copy_from_slice(&p);
            g[t] -= 1.0;
            g.iter_mut().for_each(|v| *v /= d as Real);
        }
        (losses, grads)
    }

    pub fn loss(&self, states: &[Real], actions: &[Real], weights: Option<&[Real]>) -> Result<Real> {
        let (inputs, targets) = self.teacher_forced(states, actions)?;
        let logits = self.net.forward_rows(&inputs, targets.len())?;
        Ok(weighted_mean(&self.cross_entropy(&logits, &targets).0, weights))
    }

    pub fn loss_and_grad(&self, states: &[Real], actions: &[Real], weights: Option<&[Real]>) -> Result<(Real, Params)> {
        let (inputs, targets) = self.teacher_forced(states, actions)?;
        let n = targets.len() / self.d_action;
        let den: Real = weights.map_or(n as Real, |w| w.iter().sum());
        if den <= 0.0 {
            return Ok((0.0, Params::zeros_like(self.net.params())));
        }
        let trace = self.net.trace(&inputs, targets.len())?;
        let (losses, mut grads) = self.cross_entropy(trace.output(), &targets);
        let n_bins = self.tokenizer.n_bins;
        for (r, g) in grads.chunks_mut(n_bins).enumerate() {
            let w = weights.map_or(1.0, |w| w[r / self.d_action]) / den;
            g.iter_mut().for_each(|v| *v *= w);
        }
        let (g, _) = self.net.backward_trace(&trace, &grads)?;
        Ok((weighted_mean(&losses, weights), g))
    }
}

/// First index of the maximum.
pub fn argmax(x: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector.
pub fn draw<R: Rng + ?Sized>(p: &[Real], rng: &mut R) -> usize {
    let u: Real = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}
