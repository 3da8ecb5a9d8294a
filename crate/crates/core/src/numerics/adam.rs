use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, Params};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, ..Self::default() }
    }
}

/// Adam moments for one network.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    config: AdamConfig,
    first_moment: Params<S>,
    second_moment: Params<S>,
    step_count: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(net: &Mlp<S>, config: AdamConfig) -> Self {
        Adam {
            config,
            first_moment: Params::zeros_like(net.params()),
            second_moment: Params::zeros_like(net.params()),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one bias-corrected Adam update. Parameters are left untouched on error.
    pub fn step(&mut self, net: &mut Mlp<S>, grads: &Params<S>) -> Result<()> {
        if !grads.same_shape(net.params()) || !grads.same_shape(&self.first_moment) {
            return Err(Error::Dimension("gradient shape does not mirror parameters".into()));
        }
        if let Some(layer) = grads.first_non_finite_layer() {
            return Err(Error::NonFinite { layer });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = S::lit(self.config.beta1);
        let b2 = S::lit(self.config.beta2);
        let lr = S::lit(self.config.learning_rate);
        let eps = S::lit(self.config.epsilon);
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        let one = S::one();

        let params = net.params_mut();
        let blocks = params
            .weights
            .iter_mut()
            .zip(&grads.weights)
            .zip(self.first_moment.weights.iter_mut().zip(self.second_moment.weights.iter_mut()))
            .chain(
                params
                    .biases
                    .iter_mut()
                    .zip(&grads.biases)
                    .zip(self.first_moment.biases.iter_mut().zip(self.second_moment.biases.iter_mut())),
            );
        for ((p, g), (m, v)) in blocks {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
