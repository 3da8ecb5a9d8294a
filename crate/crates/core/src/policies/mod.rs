//! Tanh-Gaussian, DDPM diffusion and autoregressive categorical policies behind one handle.

mod autoregressive;
mod diffusion;
mod gaussian;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use autoregressive::{argmax, draw, ArPolicy, ArSampleMode, TokenizerSpec, DEFAULT_BINS};
pub use diffusion::{ddpm_loss_with, reverse_chain, Denoiser, DiffusionPolicy, DiffusionSchedule};
pub use gaussian::{weighted_mean, GaussianPolicy, ATANH_CLIP};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Checkpoint, Normalizer};
use crate::{Mlp, Params, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    TanhGaussian,
    DiffusionDdpm,
    AutoregressiveCategorical,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::TanhGaussian => "tanh_gaussian",
            PolicyKind::DiffusionDdpm => "diffusion_ddpm",
            PolicyKind::AutoregressiveCategorical => "autoregressive_categorical",
        }
    }

    fn code(self) -> f64 {
        match self {
            PolicyKind::TanhGaussian => 0.0,
            PolicyKind::DiffusionDdpm => 1.0,
            PolicyKind::AutoregressiveCategorical => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(PolicyKind::TanhGaussian),
            1 => Ok(PolicyKind::DiffusionDdpm),
            2 => Ok(PolicyKind::AutoregressiveCategorical),
            _ => Err(Error::Format(format!("unknown policy kind code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub diffusion_steps: usize,
    pub n_bins: usize,
    pub ar_mode: ArSampleMode,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::DiffusionDdpm,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            diffusion_steps: 5,
            n_bins: DEFAULT_BINS,
            ar_mode: ArSampleMode::Sample,
            log_std_min: -5.0,
            log_std_max: 2.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("policy hidden sizes must be positive".into()));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::Config("diffusion_steps must be at least 1".into()));
        }
        if self.n_bins < 2 {
            return Err(Error::Config("n_bins must be at least 2".into()));
        }
        if !(self.log_std_min <= self.log_std_max) {
            return Err(Error::Config("log_std_min must not exceed log_std_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyModel {
    Gaussian(GaussianPolicy),
    Diffusion(DiffusionPolicy),
    Autoregressive(ArPolicy),
}

/// A policy plus the state normalizer, a version number bumped on every distillation,
/// and a counter of drawn action samples.
#[derive(Debug)]
pub struct PolicyHandle {
    model: PolicyModel,
    normalizer: Normalizer<Real>,
    version: u64,
    samples_drawn: AtomicU64,
}

impl Clone for PolicyHandle {
    fn clone(&self) -> Self {
        PolicyHandle {
            model: self.model.clone(),
            normalizer: self.normalizer.clone(),
            version: self.version,
            samples_drawn: AtomicU64::new(self.samples_drawn.load(Ordering::Relaxed)),
        }
    }
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

impl PolicyHandle {
    pub fn new<R: Rng + ?Sized>(
        config: &PolicyConfig,
        d_state: usize,
        d_action: usize,
        normalizer: Normalizer<Real>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if normalizer.dim() != d_state {
            return Err(Error::Dimension(format!("normalizer width {} != d_state {d_state}", normalizer.dim())));
        }
        let act = config.activation;
        let model = match config.kind {
            PolicyKind::TanhGaussian => PolicyModel::Gaussian(GaussianPolicy {
                net: Mlp::new(&layer_dims(d_state, &config.hidden, 2 * d_action), act, rng),
                d_state,
                d_action,
                log_std_min: config.log_std_min,
                log_std_max: config.log_std_max,
            }),
            PolicyKind::DiffusionDdpm => {
                let width = diffusion::input_width(d_state, d_action, config.diffusion_steps);
                PolicyModel::Diffusion(DiffusionPolicy {
                    net: Mlp::new(&layer_dims(width, &config.hidden, d_action), act, rng),
                    schedule: DiffusionSchedule::cosine(config.diffusion_steps)?,
                    d_state,
                    d_action,
                })
            }
            PolicyKind::AutoregressiveCategorical => {
                let width = autoregressive::input_width(d_state, d_action, config.n_bins);
                PolicyModel::Autoregressive(ArPolicy {
                    net: Mlp::new(&layer_dims(width, &config.hidden, config.n_bins), act, rng),
                    tokenizer: TokenizerSpec { n_bins: config.n_bins },
                    d_state,
                    d_action,
                    mode: config.ar_mode,
                })
            }
        };
        Ok(Self::from_model(model, normalizer))
    }

    pub fn from_model(model: PolicyModel, normalizer: Normalizer<Real>) -> Self {
        PolicyHandle { model, normalizer, version: 0, samples_drawn: AtomicU64::new(0) }
    }

    pub fn kind(&self) -> PolicyKind {
        match self.model {
            PolicyModel::Gaussian(_) => PolicyKind::TanhGaussian,
            PolicyModel::Diffusion(_) => PolicyKind::DiffusionDdpm,
            PolicyModel::Autoregressive(_) => PolicyKind::AutoregressiveCategorical,
        }
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut PolicyModel {
        &mut self.model
    }

    pub fn net(&self) -> &Mlp {
        match &self.model {
            PolicyModel::Gaussian(p) => &p.net,
            PolicyModel::Diffusion(p) => &p.net,
            PolicyModel::Autoregressive(p) => &p.net,
        }
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        match &mut self.model {
            PolicyModel::Gaussian(p) => &mut p.net,
            PolicyModel::Diffusion(p) => &mut p.net,
            PolicyModel::Autoregressive(p) => &mut p.net,
        }
    }

    pub fn d_state(&self) -> usize {
        self.normalizer.dim()
    }

    pub fn d_action(&self) -> usize {
        match &self.model {
            PolicyModel::Gaussian(p) => p.d_action,
            PolicyModel::Diffusion(p) => p.d_action,
            PolicyModel::Autoregressive(p) => p.d_action,
        }
    }

    pub fn normalizer(&self) -> &Normalizer<Real> {
        &self.normalizer
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Total number of actions drawn through [`PolicyHandle::sample`].
    pub fn samples_drawn(&self) -> u64 {
        self.samples_drawn.load(Ordering::Relaxed)
    }

    /// `k` actions at `state` (raw coordinates), flattened row-major.
    pub fn sample<R: Rng + ?Sized>(&self, state: &[Real], k: usize, rng: &mut R) -> Result<Vec<Real>> {
        if state.len() != self.d_state() {
            return Err(Error::Dimension(format!("state width {} != {}", state.len(), self.d_state())));
        }
        self.samples_drawn.fetch_add(k as u64, Ordering::Relaxed);
        let s = self.normalizer.apply(state);
        match &self.model {
            PolicyModel::Gaussian(p) => p.sample(&s, k, rng),
            PolicyModel::Diffusion(p) => p.sample(&s, k, rng),
            PolicyModel::Autoregressive(p) => p.sample(&s, k, rng),
        }
    }

    fn normalize_batch(&self, states: &[Real]) -> Vec<Real> {
        let mut out = Vec::with_capacity(states.len());
        for s in states.chunks(self.d_state()) {
            self.normalizer.apply_into(s, &mut out);
        }
        out
    }

    /// Supervised loss on `(state, action)` rows, weighted mean.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        states: &[Real],
        actions: &[Real],
        weights: Option<&[Real]>,
        rng: &mut R,
    ) -> Result<Real> {
        let s = self.normalize_batch(states);
        match &self.model {
            PolicyModel::Gaussian(p) => p.loss(&s, actions, weights),
            PolicyModel::Diffusion(p) => p.loss(&s, actions, weights, rng),
            PolicyModel::Autoregressive(p) => p.loss(&s, actions, weights),
        }
    }

    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        states: &[Real],
        actions: &[Real],
        weights: Option<&[Real]>,
        rng: &mut R,
    ) -> Result<(Real, Params)> {
        let s = self.normalize_batch(states);
        match &self.model {
            PolicyModel::Gaussian(p) => p.loss_and_grad(&s, actions, weights),
            PolicyModel::Diffusion(p) => p.loss_and_grad(&s, actions, weights, rng),
            PolicyModel::Autoregressive(p) => p.loss_and_grad(&s, actions, weights),
        }
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.push_scalar(format!("{prefix}.kind"), self.kind().code());
        ckpt.push_scalar(format!("{prefix}.version"), self.version as f64);
        ckpt.push_scalar(format!("{prefix}.d_action"), self.d_action() as f64);
        ckpt.push(format!("{prefix}.norm.shift"), vec![self.d_state()], self.normalizer.shift.clone());
        ckpt.push(format!("{prefix}.norm.scale"), vec![self.d_state()], self.normalizer.scale.clone());
        match &self.model {
            PolicyModel::Gaussian(p) => {
                ckpt.push(format!("{prefix}.log_std_bounds"), vec![2], vec![p.log_std_min, p.log_std_max]);
            }
            PolicyModel::Diffusion(p) => {
                ckpt.push(format!("{prefix}.betas"), vec![p.schedule.n_steps()], p.schedule.betas().to_vec());
            }
            PolicyModel::Autoregressive(p) => {
                ckpt.push_scalar(format!("{prefix}.n_bins"), p.tokenizer.n_bins as f64);
                ckpt.push_scalar(format!("{prefix}.greedy"), if p.mode == ArSampleMode::Greedy { 1.0 } else { 0.0 });
            }
        }
        ckpt.push_mlp(&format!("{prefix}.net"), self.net());
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let kind = PolicyKind::from_code(ckpt.scalar(&format!("{prefix}.kind"))?)?;
        let d_action = ckpt.scalar(&format!("{prefix}.d_action"))? as usize;
        let shift = ckpt.require(&format!("{prefix}.norm.shift"))?.data.clone();
        let scale = ckpt.require(&format!("{prefix}.norm.scale"))?.data.clone();
        let d_state = shift.len();
        let net: Mlp = ckpt.read_mlp(&format!("{prefix}.net"))?;
        let model = match kind {
            PolicyKind::TanhGaussian => {
                let b = &ckpt.require(&format!("{prefix}.log_std_bounds"))?.data;
                PolicyModel::Gaussian(GaussianPolicy { net, d_state, d_action, log_std_min: b[0], log_std_max: b[1] })
            }
            PolicyKind::DiffusionDdpm => {
                let betas = ckpt.require(&format!("{prefix}.betas"))?.data.clone();
                PolicyModel::Diffusion(DiffusionPolicy {
                    net,
                    schedule: DiffusionSchedule::from_betas(betas)?,
                    d_state,
                    d_action,
                })
            }
            PolicyKind::AutoregressiveCategorical => {
                let n_bins = ckpt.scalar(&format!("{prefix}.n_bins"))? as usize;
                let mode = if ckpt.scalar(&format!("{prefix}.greedy"))? != 0.0 {
                    ArSampleMode::Greedy
                } else {
                    ArSampleMode::Sample
                };
                PolicyModel::Autoregressive(ArPolicy { net, tokenizer: TokenizerSpec { n_bins }, d_state, d_action, mode })
            }
        };
        let mut handle = Self::from_model(model, Normalizer { shift, scale });
        handle.version = ckpt.scalar(&format!("{prefix}.version"))? as u64;
        Ok(handle)
    }
}
