use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::{Mlp, Params, Real};

/// Variance schedule of a DDPM chain. Index `t - 1` holds step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<Real>,
    alphas: Vec<Real>,
    alpha_bars: Vec<Real>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<Real>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("diffusion schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<Real> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(DiffusionSchedule { betas, alphas, alpha_bars })
    }

    /// Cosine schedule: `abar(t) = f(t) / f(0)`, `f(t) = cos^2(((t / K) + 0.008) / 1.008 * pi / 2)`,
    /// with betas capped at 0.999.
    pub fn cosine(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("diffusion schedule needs at least one step".into()));
        }
        let s = 0.008;
        let f = |t: usize| {
            let x = ((t as Real / n_steps as Real) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let betas = (1..=n_steps).map(|t| (1.0 - f(t) / f(t - 1)).min(0.999)).collect();
        Self::from_betas(betas)
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[Real] {
        &self.betas
    }

    pub fn alphas(&self) -> &[Real] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[Real] {
        &self.alpha_bars
    }
}

/// Anything that predicts the noise for rows of `[noisy action, state, one-hot step]`.
pub trait Denoiser {
    fn predict_noise(&self, inputs: &[Real], rows: usize) -> Result<Vec<Real>>;
}

impl Denoiser for Mlp {
    fn predict_noise(&self, inputs: &[Real], rows: usize) -> Result<Vec<Real>> {
        self.forward_rows(inputs, rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy {
    pub net: Mlp,
    pub schedule: DiffusionSchedule,
    pub d_state: usize,
    pub d_action: usize,
}

pub fn input_width(d_state: usize, d_action: usize, n_steps: usize) -> usize {
    d_action + d_state + n_steps
}

fn push_row(out: &mut Vec<Real>, x: &[Real], state: &[Real], t: usize, n_steps: usize) {
    out.extend_from_slice(x);
    out.extend_from_slice(state);
    let base = out.len();
    out.resize(base + n_steps, 0.0);
    out[base + t - 1] = 1.0;
}

/// Runs the reverse chain for `k` samples at one (normalized) state.
pub fn reverse_chain<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    schedule: &DiffusionSchedule,
    state: &[Real],
    k: usize,
    d_action: usize,
    rng: &mut R,
) -> Result<Vec<Real>> {
    let n_steps = schedule.n_steps();
    let mut x: Vec<Real> = (0..k * d_action).map(|_| rng.sample::<Real, _>(StandardNormal)).collect();
    let mut inputs = Vec::with_capacity(k * input_width(state.len(), d_action, n_steps));
    for t in (1..=n_steps).rev() {
        inputs.clear();
        for row in x.chunks(d_action) {
            push_row(&mut inputs, row, state, t, n_steps);
        }
        let eps = denoiser.predict_noise(&inputs, k)?;
        let alpha = schedule.alphas[t - 1];
        let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bars[t - 1]).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let sigma = schedule.betas[t - 1].sqrt();
        for (xi, &e) in x.iter_mut().zip(&eps) {
            *xi = inv * (*xi - coef * e);
            if t > 1 {
                *xi += sigma * rng.sample::<Real, _>(StandardNormal);
            }
        }
    }
    x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(x)
}

/// Draws a step and a noise vector per example and builds the denoiser inputs.
fn corrupt<R: Rng + ?Sized>(
    schedule: &DiffusionSchedule,
    states: &[Real],
    actions: &[Real],
    d_state: usize,
    d_action: usize,
    rng: &mut R,
) -> (Vec<Real>, Vec<Real>) {
    let n = actions.len() / d_action;
    let n_steps = schedule.n_steps();
    let mut inputs = Vec::with_capacity(n * input_width(d_state, d_action, n_steps));
    let mut noise = Vec::with_capacity(n * d_action);
    let mut x = vec![0.0; d_action];
    for i in 0..n {
        let t = rng.random_range(1..=n_steps);
        let ab = schedule.alpha_bars[t - 1];
        for (j, xj) in x.iter_mut().enumerate() {
            let e: Real = rng.sample(StandardNormal);
            noise.push(e);
            *xj = ab.sqrt() * actions[i * d_action + j] + (1.0 - ab).sqrt() * e;
        }
        push_row(&mut inputs, &x, &states[i * d_state..(i + 1) * d_state], t, n_steps);
    }
    (inputs, noise)
}

fn check_batch(states: &[Real], actions: &[Real], weights: Option<&[Real]>, ds: usize, da: usize) -> Result<usize> {
    let n = actions.len() / da;
    if actions.len() != n * da || states.len() != n * ds || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::Dimension(format!(
            "batch of {} states / {} actions / {:?} weights does not line up",
            states.len(),
            actions.len(),
            weights.map(<[Real]>::len)
        )));
    }
    Ok(n)
}

/// Weighted mean of `||eps - eps_hat||` over the batch (states already normalized).
pub fn ddpm_loss_with<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    schedule: &DiffusionSchedule,
    states: &[Real],
    actions: &[Real],
    weights: Option<&[Real]>,
    d_state: usize,
    d_action: usize,
    rng: &mut R,
) -> Result<Real> {
    let n = check_batch(states, actions, weights, d_state, d_action)?;
    let (inputs, noise) = corrupt(schedule, states, actions, d_state, d_action, rng);
    let pred = denoiser.predict_noise(&inputs, n)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        let r = &noise[i * d_action..(i + 1) * d_action];
        let p = &pred[i * d_action..(i + 1) * d_action];
        num += w * r.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<Real>().sqrt();
        den += w;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

impl DiffusionPolicy {
    pub fn sample<R: Rng + ?Sized>(&self, state: &[Real], k: usize, rng: &mut R) -> Result<Vec<Real>> {
        reverse_chain(&self.net, &self.schedule, state, k, self.d_action, rng)
    }

    pub fn loss<R: Rng + ?Sized>(
        &self,
        states: &[Real],
        actions: &[Real],
        weights: Option<&[Real]>,
        rng: &mut R,
    ) -> Result<Real> {
        ddpm_loss_with(&self.net, &self.schedule, states, actions, weights, self.d_state, self.d_action, rng)
    }

    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        states: &[Real],
        actions: &[Real],
        weights: Option<&[Real]>,
        rng: &mut R,
    ) -> Result<(Real, Params)> {
        let (ds, da) = (self.d_state, self.d_action);
        let n = check_batch(states, actions, weights, ds, da)?;
        let (inputs, noise) = corrupt(&self.schedule, states, actions, ds, da, rng);
        let trace = self.net.trace(&inputs, n)?;
        let pred = trace.output();
        let den: Real = weights.map_or(n as Real, |w| w.iter().sum());
        if den <= 0.0 {
            return Ok((0.0, Params::zeros_like(self.net.params())));
        }
        let mut loss = 0.0;
        let mut grad = vec![0.0; n * da];
        for i in 0..n {
            let w = weights.map_or(1.0, |w| w[i]) / den;
            let r = &noise[i * da..(i + 1) * da];
            let p = &pred[i * da..(i + 1) * da];
            let norm = r.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<Real>().sqrt();
            loss += w * norm;
            if norm > 0.0 {
                for j in 0..da {
                    grad[i * da + j] = w * (p[j] - r[j]) / norm;
                }
            }
        }
        let (g, _) = self.net.backward_trace(&trace, &grad)?;
        Ok((loss, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Activation;
    use crate::rng::stream;

    struct Zero(usize);
    impl Denoiser for Zero {
        fn predict_noise(&self, _inputs: &[Real], rows: usize) -> Result<Vec<Real>> {
            Ok(vec![0.0; rows * self.0])
        }
    }

    /// Recovers the exact noise from the corrupted input, knowing the clean action.
    struct Perfect<'a> {
        schedule: &'a DiffusionSchedule,
        clean: Real,
    }
    impl Denoiser for Perfect<'_> {
        fn predict_noise(&self, inputs: &[Real], rows: usize) -> Result<Vec<Real>> {
            let k = self.schedule.n_steps();
            let width = 2 + k;
            Ok((0..rows)
                .map(|r| {
                    let row = &inputs[r * width..(r + 1) * width];
                    let t = row[2..].iter().position(|&v| v == 1.0).unwrap() + 1;
                    let ab = self.schedule.alpha_bars()[t - 1];
                    (row[0] - ab.sqrt() * self.clean) / (1.0 - ab).sqrt()
                })
                .collect())
        }
    }

    #[test]
    fn cosine_schedule_products() {
        let s = DiffusionSchedule::cosine(5).unwrap();
        let f = |t: f64| (((t / 5.0) + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut prod = 1.0;
        for t in 1..=5 {
            let beta = (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999);
            prod *= 1.0 - beta;
            assert!((s.alpha_bars()[t - 1] - prod).abs() < 1e-15);
            assert!(s.betas()[t - 1] > 0.0 && s.betas()[t - 1] < 1.0);
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn single_step_zero_denoiser() {
        let s = DiffusionSchedule::from_betas(vec![0.5]).unwrap();
        let mut r1 = stream(3, &[1]);
        let mut r2 = stream(3, &[1]);
        let out = reverse_chain(&Zero(1), &s, &[0.0], 64, 1, &mut r1).unwrap();
        for v in out {
            let a1: Real = r2.sample(StandardNormal);
            assert!((v - (a1 / 0.5f64.sqrt()).clamp(-1.0, 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let net = Mlp::new(&[input_width(2, 2, 5), 16, 2], Activation::Relu, &mut stream(1, &[]));
        let p = DiffusionPolicy { net, schedule: DiffusionSchedule::cosine(5).unwrap(), d_state: 2, d_action: 2 };
        let a = p.sample(&[0.3, -0.2], 50, &mut stream(9, &[])).unwrap();
        let b = p.sample(&[0.3, -0.2], 50, &mut stream(9, &[])).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn loss_closed_forms() {
        let schedule = DiffusionSchedule::cosine(5).unwrap();
        let states = vec![0.0; 20];
        let actions = vec![0.4; 20];
        let perfect = Perfect { schedule: &schedule, clean: 0.4 };
        let l = ddpm_loss_with(&perfect, &schedule, &states, &actions, None, 1, 1, &mut stream(2, &[])).unwrap();
        assert!(l.abs() < 1e-12);
        // zero denoiser: the loss is the mean noise norm of the same draws
        let zero = ddpm_loss_with(&Zero(1), &schedule, &states, &actions, None, 1, 1, &mut stream(2, &[])).unwrap();
        let mut rng = stream(2, &[]);
        let mut expected = 0.0;
        for _ in 0..20 {
            let _t = rng.random_range(1..=5usize);
            let e: Real = rng.sample(StandardNormal);
            expected += e.abs() / 20.0;
        }
        assert!((zero - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_grad_path() {
        let net = Mlp::new(&[input_width(2, 2, 3), 8, 2], Activation::Tanh, &mut stream(4, &[]));
        let p = DiffusionPolicy { net, schedule: DiffusionSchedule::cosine(3).unwrap(), d_state: 2, d_action: 2 };
        let s = [0.1, 0.2, -0.3, 0.4];
        let a = [0.5, -0.5, 0.9, 0.0];
        let w = [1.0, 3.0];
        let l1 = p.loss(&s, &a, Some(&w), &mut stream(5, &[])).unwrap();
        let (l2, _) = p.loss_and_grad(&s, &a, Some(&w), &mut stream(5, &[])).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        let (l0, g0) = p.loss_and_grad(&s, &a, Some(&[0.0, 0.0]), &mut stream(5, &[])).unwrap();
        assert_eq!(l0, 0.0);
        assert!(g0.iter().all(|&v| v == 0.0));
    }
}
