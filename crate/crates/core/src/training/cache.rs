use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use crate::error::Result;
use crate::policies::PolicyHandle;
use crate::rng::{derive_seed, stream, tag};
use crate::Real;

/// Quantizes each coordinate to 1e-9 and hashes the result.
pub fn state_hash(state: &[Real]) -> u64 {
    let q: Vec<u64> = state.iter().map(|v| (v * 1e9).round() as i64 as u64).collect();
    derive_seed(0x5eed_cafe, &q)
}

#[derive(Debug, Clone)]
struct Entry {
    version: u64,
    samples: Vec<Real>,
}

/// Raw policy samples per state, tagged with the policy version that drew them.
///
/// A sample set is a pure function of (seed, policy version, state), so filling entries in
/// any order or on any number of threads yields the same content.
#[derive(Debug, Clone, Default)]
pub struct ActionCache {
    entries: HashMap<u64, Entry>,
    k: usize,
    seed: u64,
    pub hits: u64,
    pub misses: u64,
}

impl ActionCache {
    pub fn new(k: usize, seed: u64) -> Self {
        ActionCache { entries: HashMap::new(), k, seed, hits: 0, misses: 0 }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }

    fn draw(&self, policy: &PolicyHandle, hash: u64, state: &[Real]) -> Result<Vec<Real>> {
        let mut rng = stream(self.seed, &[tag::CACHE, policy.version(), hash]);
        policy.sample(state, self.k, &mut rng)
    }

    /// Samples for one state, drawing them on a miss or a stale version.
    pub fn lookup_or_fill(&mut self, policy: &PolicyHandle, state: &[Real]) -> Result<&[Real]> {
        let hash = state_hash(state);
        let fresh = self.entries.get(&hash).is_some_and(|e| e.version == policy.version());
        if fresh {
            self.hits += 1;
        } else {
            self.misses += 1;
            let samples = self.draw(policy, hash, state)?;
            self.entries.insert(hash, Entry { version: policy.version(), samples });
        }
        Ok(&self.entries[&hash].samples)
    }

    /// Looks up many states at once, filling misses in parallel.
    pub fn lookup_many(&mut self, policy: &PolicyHandle, states: &[Real], d_state: usize) -> Result<Vec<&[Real]>> {
        let hashes: Vec<u64> = states.chunks(d_state).map(state_hash).collect();
        let mut missing: Vec<(u64, &[Real])> = Vec::new();
        let mut queued = HashSet::new();
        for (h, s) in hashes.iter().zip(states.chunks(d_state)) {
            let fresh = self.entries.get(h).is_some_and(|e| e.version == policy.version());
            if fresh || !queued.insert(*h) {
                self.hits += 1;
            } else {
                self.misses += 1;
                missing.push((*h, s));
            }
        }
        let filled = missing
            .par_iter()
            .map(|&(h, s)| self.draw(policy, h, s).map(|v| (h, v)))
            .collect::<Result<Vec<_>>>()?;
        for (h, samples) in filled {
            self.entries.insert(h, Entry { version: policy.version(), samples });
        }
        Ok(hashes.iter().map(|h| self.entries[h].samples.as_slice()).collect())
    }

    /// Redraws samples for every given state under the current policy version.
    pub fn recompute_all(&mut self, policy: &PolicyHandle, states: &[Real], d_state: usize) -> Result<()> {
        let mut uniq: Vec<(u64, &[Real])> = states.chunks(d_state).map(|s| (state_hash(s), s)).collect();
        uniq.sort_by_key(|(h, _)| *h);
        uniq.dedup_by_key(|(h, _)| *h);
        let filled = uniq
            .par_iter()
            .map(|&(h, s)| self.draw(policy, h, s).map(|v| (h, v)))
            .collect::<Result<Vec<_>>>()?;
        for (h, samples) in filled {
            self.entries.insert(h, Entry { version: policy.version(), samples });
        }
        Ok(())
    }

    /// Whether any entry was drawn by an older policy version.
    pub fn has_stale(&self, policy: &PolicyHandle) -> bool {
        self.entries.values().any(|e| e.version != policy.version())
    }

    /// Deterministic content digest: sorted `(hash, version, samples)`.
    pub fn digest(&self) -> Vec<(u64, u64, Vec<Real>)> {
        let mut v: Vec<_> = self.entries.iter().map(|(h, e)| (*h, e.version, e.samples.clone())).collect();
        v.sort_by_key(|(h, _, _)| *h);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Normalizer;
    use crate::policies::PolicyConfig;

    fn policy() -> PolicyHandle {
        let cfg = PolicyConfig { hidden: vec![8], ..Default::default() };
        PolicyHandle::new(&cfg, 2, 2, Normalizer::identity(2), &mut stream(1, &[])).unwrap()
    }

    #[test]
    fn second_lookup_hits() {
        let p = policy();
        let mut c = ActionCache::new(4, 7);
        let a = c.lookup_or_fill(&p, &[0.5, 0.5]).unwrap().to_vec();
        let b = c.lookup_or_fill(&p, &[0.5, 0.5]).unwrap().to_vec();
        assert_eq!(a, b);
        assert_eq!((c.hits, c.misses), (1, 1));
        assert_eq!(p.samples_drawn(), 4);
    }

    #[test]
    fn version_bump_invalidates() {
        let mut p = policy();
        let mut c = ActionCache::new(4, 7);
        let a = c.lookup_or_fill(&p, &[0.5, 0.5]).unwrap().to_vec();
        p.bump_version();
        assert!(c.has_stale(&p));
        let b = c.lookup_or_fill(&p, &[0.5, 0.5]).unwrap().to_vec();
        assert_ne!(a, b);
        assert_eq!(c.misses, 2);
        assert!(!c.has_stale(&p));
    }

    #[test]
    fn recompute_independent_of_workers() {
        let p = policy();
        let states: Vec<Real> = (0..400).map(|i| (i as Real * 0.173).sin() * 3.0).collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut c = ActionCache::new(3, 11);
                c.recompute_all(&p, &states, 2).unwrap();
                c.digest()
            })
        };
        let one = run(1);
        assert_eq!(one.len(), 200);
        assert_eq!(one, run(3));
        let mut lazy = ActionCache::new(3, 11);
        lazy.lookup_many(&p, &states, 2).unwrap();
        assert_eq!(lazy.digest(), one);
    }
}
