//! Hierarchical deterministic random streams.
//!
//! A stream is identified by its lineage `(master_seed, [(tag, index), ...])`.
//! The lineage is hashed with SHA-256 into a ChaCha20 seed, so a stream for
//! `("round", 3), ("client", 12)` is the same no matter which worker draws it
//! or in what order streams are created.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha20Rng,
    master_seed: u64,
    labels: Vec<(String, u64)>,
}

pub fn derive_rng_stream(master_seed: u64, labels: &[(&str, u64)]) -> RngStream {
    let labels: Vec<(String, u64)> = labels.iter().map(|(t, i)| (t.to_string(), *i)).collect();
    RngStream::from_lineage(master_seed, labels)
}

impl RngStream {
    fn from_lineage(master_seed: u64, labels: Vec<(String, u64)>) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"fedsplit-rng-v1");
        hasher.update(master_seed.to_le_bytes());
        for (tag, idx) in &labels {
            hasher.update((tag.len() as u64).to_le_bytes());
            hasher.update(tag.as_bytes());
            hasher.update(idx.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        Self { rng: ChaCha20Rng::from_seed(seed), master_seed, labels }
    }

    /// Stream whose lineage extends this one's by `(tag, index)`.
    /// Independent of how many values were already drawn from `self`.
    pub fn child(&self, tag: &str, index: u64) -> Self {
        let mut labels = self.labels.clone();
        labels.push((tag.to_string(), index));
        Self::from_lineage(self.master_seed, labels)
    }

    pub fn lineage(&self) -> (u64, &[(String, u64)]) {
        (self.master_seed, &self.labels)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal_vec(&mut self, n: usize, sd: f64) -> Vec<f64> {
        (0..n).map(|_| sd * self.normal()).collect()
    }

    /// Uniform on `[a, b)`; returns `a` when the interval is empty.
    pub fn uniform(&mut self, a: f64, b: f64) -> f64 {
        if b <= a {
            return a;
        }
        self.rng.random_range(a..b)
    }

    pub fn sign(&mut self) -> f64 {
        if self.rng.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Symmetric Dirichlet(π, …, π) over `k` components.
    pub fn dirichlet(&mut self, pi: f64, k: usize) -> Vec<f64> {
        assert!(pi > 0.0 && k > 0, "dirichlet needs pi > 0 and k > 0");
        let gamma = Gamma::new(pi, 1.0).expect("positive shape");
        let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut self.rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            draws.iter_mut().for_each(|v| *v /= total);
        } else {
            // every gamma draw underflowed: all mass lands on one component
            draws.iter_mut().for_each(|v| *v = 0.0);
            let hot = self.index(k);
            draws[hot] = 1.0;
        }
        draws
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut self.rng);
        p
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.rng);
    }

    /// `k` distinct indices from `0..n`, sorted ascending.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(&mut self.rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_lineage_identical_draws() {
        let mut a = derive_rng_stream(7, &[("round", 3), ("client", 12)]);
        let mut b = derive_rng_stream(7, &[("round", 3), ("client", 12)]);
        for _ in 0..1000 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn neighbouring_clients_differ() {
        let mut a = derive_rng_stream(7, &[("round", 3), ("client", 12)]);
        let mut b = derive_rng_stream(7, &[("round", 3), ("client", 13)]);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_ne!(xa, xb);
    }

    #[test]
    fn child_matches_flat_lineage() {
        let parent = derive_rng_stream(1, &[("round", 2)]);
        let mut burned = parent.clone();
        burned.normal();
        let mut c1 = parent.child("client", 5);
        let mut c2 = burned.child("client", 5);
        let mut flat = derive_rng_stream(1, &[("round", 2), ("client", 5)]);
        let v = flat.next_u64();
        assert_eq!(c1.next_u64(), v);
        assert_eq!(c2.next_u64(), v);
    }

    #[test]
    fn tag_boundaries_are_unambiguous() {
        let mut a = derive_rng_stream(0, &[("ab", 1)]);
        let mut b = derive_rng_stream(0, &[("a", 1)]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn standard_normal_mean_clt_bound() {
        let mut r = derive_rng_stream(42, &[("clt", 0)]);
        let n = 1_000_000;
        let mean = (0..n).map(|_| r.normal()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn dirichlet_sums_to_one() {
        let mut r = derive_rng_stream(3, &[]);
        for &pi in &[1e-3, 0.1, 1.0, 1e6] {
            let p = r.dirichlet(pi, 10);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn sampling_helpers() {
        let mut r = derive_rng_stream(9, &[]);
        let mut p = r.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
        let s = r.sample_without_replacement(10, 10);
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        for _ in 0..100 {
            let x = r.uniform(-0.1, 0.1);
            assert!((-0.1..0.1).contains(&x));
            assert!(r.sign().abs() == 1.0);
        }
    }
}
