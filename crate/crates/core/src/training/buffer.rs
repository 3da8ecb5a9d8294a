use rand::Rng;

use crate::env::{Dataset, Transition};
use crate::error::{Error, Result};

/// Offline dataset plus a growing online buffer, sampled with a fixed mixing ratio.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pub offline: Dataset,
    pub online: Vec<Transition>,
    pub mixing_ratio: f64,
    pub capacity: usize,
    /// Next slot to overwrite once the online buffer is full.
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(offline: Dataset, mixing_ratio: f64, capacity: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&mixing_ratio) {
            return Err(Error::Config(format!("mixing ratio {mixing_ratio} outside [0, 1]")));
        }
        if capacity == 0 {
            return Err(Error::Config("online buffer capacity must be positive".into()));
        }
        Ok(ReplayBuffer { offline, online: Vec::new(), mixing_ratio, capacity, cursor: 0 })
    }

    pub fn len(&self) -> usize {
        self.offline.len() + self.online.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, t: Transition) {
        if self.online.len() < self.capacity {
            self.online.push(t);
        } else {
            self.online[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Offline rows first, then online rows. `round(ratio * n)` rows come from the offline
    /// data, or all of them while the online buffer is empty.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        let n_off = if self.online.is_empty() {
            n
        } else if self.offline.is_empty() {
            0
        } else {
            (self.mixing_ratio * n as f64).round() as usize
        };
        let mut out = Vec::with_capacity(n);
        for _ in 0..n_off {
            out.push(&self.offline.transitions[rng.random_range(0..self.offline.len())]);
        }
        for _ in n_off..n {
            out.push(&self.online[rng.random_range(0..self.online.len())]);
        }
        out
    }
}
