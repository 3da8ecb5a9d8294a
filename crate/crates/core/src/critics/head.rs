use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::softmax;
use crate::Real;

/// Categorical value head trained against Gaussian-smoothed targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HlGaussHead {
    pub n_bins: usize,
    pub v_min: Real,
    pub v_max: Real,
    pub sigma: Real,
}

/// Number of target values clamped into `[v_min, v_max]`, process wide.
static CLAMPED_TARGETS: AtomicU64 = AtomicU64::new(0);

pub fn clamped_target_count() -> u64 {
    CLAMPED_TARGETS.load(Ordering::Relaxed)
}

fn normal_cdf(x: Real) -> Real {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

impl HlGaussHead {
    /// `sigma = sigma_ratio * bin width`.
    pub fn new(n_bins: usize, v_min: Real, v_max: Real, sigma_ratio: Real) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::Config("hl_gauss needs at least two bins".into()));
        }
        if !(v_min < v_max) {
            return Err(Error::Config(format!("hl_gauss range [{v_min}, {v_max}] is empty")));
        }
        if !(sigma_ratio > 0.0) {
            return Err(Error::Config("hl_gauss sigma must be positive".into()));
        }
        let width = (v_max - v_min) / n_bins as Real;
        Ok(HlGaussHead { n_bins, v_min, v_max, sigma: sigma_ratio * width })
    }

    pub fn bin_width(&self) -> Real {
        (self.v_max - self.v_min) / self.n_bins as Real
    }

    pub fn center(&self, j: usize) -> Real {
        self.v_min + (j as Real + 0.5) * self.bin_width()
    }

    pub fn centers(&self) -> Vec<Real> {
        (0..self.n_bins).map(|j| self.center(j)).collect()
    }

    /// Expected value under `softmax(logits)` and the probabilities.
    pub fn value(&self, logits: &[Real]) -> (Real, Vec<Real>) {
        let p = softmax(logits);
        let q = p.iter().enumerate().map(|(j, pj)| pj * self.center(j)).sum::<Real>();
        (q.clamp(self.v_min, self.v_max), p)
    }

    /// Gradient of [`HlGaussHead::value`] with respect to the logits.
    pub fn value_grad(&self, q: Real, p: &[Real]) -> Vec<Real> {
        p.iter().enumerate().map(|(j, pj)| pj * (self.center(j) - q)).collect()
    }

    /// Gaussian mass per bin around `value`, renormalized over the support.
    /// Values outside the support are clamped and counted.
    pub fn targets(&self, value: Real) -> Vec<Real> {
        let mut y = value;
        if !(value >= self.v_min && value <= self.v_max) {
            CLAMPED_TARGETS.fetch_add(1, Ordering::Relaxed);
            y = if value.is_nan() { self.v_min } else { value.clamp(self.v_min, self.v_max) };
        }
        let w = self.bin_width();
        let cdf: Vec<Real> = (0..=self.n_bins)
            .map(|j| normal_cdf((self.v_min + j as Real * w - y) / self.sigma))
            .collect();
        let total = cdf[self.n_bins] - cdf[0];
        let mut p: Vec<Real> = cdf.windows(2).map(|c| (c[1] - c[0]) / total).collect();
        if !(total > 0.0) || p.iter().any(|v| !v.is_finite()) {
            // sigma vanishingly small: all mass in the containing bin
            let j = (((y - self.v_min) / w).floor() as usize).min(self.n_bins - 1);
            p = vec![0.0; self.n_bins];
            p[j] = 1.0;
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head() -> HlGaussHead {
        HlGaussHead::new(51, -100.0, 0.0, 0.75).unwrap()
    }

    #[test]
    fn uniform_logits_give_midpoint() {
        let (q, _) = head().value(&[0.0; 51]);
        assert!((q + 50.0).abs() < 1e-9);
    }

    #[test]
    fn one_hot_logit_gives_center() {
        let h = head();
        for j in [0, 17, 50] {
            let mut l = vec![-1e4; 51];
            l[j] = 0.0;
            let (q, _) = h.value(&l);
            let oracle = -100.0 + (j as f64 + 0.5) * (100.0 / 51.0);
            assert!((q - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn targets_normalized() {
        let h = head();
        for v in [-150.0, -100.0, -73.3, -50.0, -0.01, 0.0, 12.0] {
            let p = h.targets(v);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn delta_limit_is_one_hot() {
        let h = HlGaussHead { sigma: 1e-9, ..head() };
        let p = h.targets(h.center(20));
        assert!((p[20] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_split_is_symmetric() {
        let h = HlGaussHead::new(10, 0.0, 10.0, 1.0).unwrap();
        let p = h.targets(5.0);
        for j in 0..5 {
            assert!((p[4 - j] - p[5 + j]).abs() < 1e-12);
        }
        // bins [4, 5] and [5, 6] with sigma 1: Phi(1) - Phi(0) each, over Phi(5) - Phi(-5)
        let oracle = (0.841_344_746_068_542_9 - 0.5) / (1.0 - 2.0 * 2.866_515_718_791_939e-7);
        assert!((p[5] - oracle).abs() < 1e-9);
    }
}
