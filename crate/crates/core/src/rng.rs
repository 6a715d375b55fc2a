//! Counter-keyed random streams.
//!
//! Every consumer of randomness asks for a stream keyed by
//! `(seed, domain, index)`. Streams are ChaCha8 instances whose key is a hash
//! of `(seed, domain)` and whose stream id is `index`, so the draws of path
//! `i` never depend on how many other paths exist, in what order they were
//! simulated, or on which thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::sde::TimeGrid;

/// Stream domains. Distinct consumers never share a stream.
pub mod domain {
    pub const BROWNIAN: u64 = 0x4252_4f57;
    pub const INITIAL: u64 = 0x494e_4954;
    pub const REVERSE: u64 = 0x5245_5645;
    pub const PRIOR: u64 = 0x5052_494f;
    pub const DATASET: u64 = 0x4441_5441;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const BOOTSTRAP: u64 = 0x424f_4f54;
    pub const PROJECTION: u64 = 0x5052_4f4a;
    pub const PERMUTATION: u64 = 0x5045_524d;
    pub const VERIFY: u64 = 0x5645_5249;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(domain));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

#[inline]
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Brownian increments of one path, regenerated on demand from
/// `(seed, path_index)`. Increments are `N(0, dt)` per coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BrownianStore {
    pub seed: u64,
    pub path_index: u64,
    pub n_steps: usize,
    pub noise_dim: usize,
    dt_bits: u64,
}

impl BrownianStore {
    pub fn new(seed: u64, path_index: u64, grid: &TimeGrid, noise_dim: usize) -> Self {
        BrownianStore {
            seed,
            path_index,
            n_steps: grid.n_steps,
            noise_dim,
            dt_bits: grid.dt().to_bits(),
        }
    }

    pub fn dt(&self) -> f64 {
        f64::from_bits(self.dt_bits)
    }

    pub fn len(&self) -> usize {
        self.n_steps * self.noise_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `n_steps × noise_dim` increments, row-major by step.
    pub fn fill(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.len());
        let sq = self.dt().sqrt();
        let mut rng = stream(self.seed, domain::BROWNIAN, self.path_index);
        for v in out.iter_mut() {
            *v = sq * standard_normal(&mut rng);
        }
    }

    pub fn increments(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.fill(&mut out);
        out
    }
}

/// Sums consecutive blocks of `factor` steps, producing the increments of the
/// same Brownian path on a grid `factor` times coarser.
pub fn coarsen_increments(dw: &[f64], noise_dim: usize, factor: usize) -> Vec<f64> {
    assert!(factor >= 1);
    let n = dw.len() / noise_dim;
    assert_eq!(n % factor, 0, "step count must be divisible by the coarsening factor");
    let mut out = vec![0.0; (n / factor) * noise_dim];
    for k in 0..n {
        let c = k / factor;
        for l in 0..noise_dim {
            out[c * noise_dim + l] += dw[k * noise_dim + l];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increments_are_pure_in_seed_and_path() {
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let a = BrownianStore::new(7, 3, &grid, 2).increments();
        let b = BrownianStore::new(7, 3, &grid, 2).increments();
        let c = BrownianStore::new(7, 4, &grid, 2).increments();
        let d = BrownianStore::new(8, 3, &grid, 2).increments();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn coarsening_preserves_endpoint() {
        let grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let dw = BrownianStore::new(1, 0, &grid, 1).increments();
        let coarse = coarsen_increments(&dw, 1, 8);
        assert_eq!(coarse.len(), 8);
        let total: f64 = dw.iter().sum();
        let total_c: f64 = coarse.iter().sum();
        assert!((total - total_c).abs() < 1e-12);
    }
}
