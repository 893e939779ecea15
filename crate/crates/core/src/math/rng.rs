//! Seeded, platform-independent random streams.
//!
//! The generator is ChaCha8 seeded through `seed_from_u64`. Normal draws are
//! `rand_distr`'s ziggurat sampler on the owned stream, never a global or
//! thread-local generator. Child streams are derived from
//! `SHA-256(parent_seed_le || label)`, first eight bytes little-endian.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{MathError, Matrix};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Seed of the child stream for `label`.
    pub fn derive_seed(seed: u64, label: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(label.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    /// Independent stream keyed by this stream's seed and `label`; does not
    /// consume draws from `self`.
    pub fn child(&self, label: &str) -> Rng {
        Rng::new(Self::derive_seed(self.seed, label))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// i.i.d. N(0, 1) matrix, filled in row-major order.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix, MathError> {
        if rows == 0 || cols == 0 {
            return Err(MathError::Shape(format!("gaussian matrix needs nonzero dims, got {rows}x{cols}")));
        }
        let mut data = vec![0.0; rows * cols];
        self.fill_normal(&mut data);
        Matrix::from_vec(rows, cols, data)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Free-function form of [`Rng::gaussian_matrix`].
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix, MathError> {
    rng.gaussian_matrix(rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let a = Rng::new(42).gaussian_matrix(4, 4).unwrap();
        let b = Rng::new(42).gaussian_matrix(4, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_different_matrix() {
        let a = Rng::new(42).gaussian_matrix(4, 4).unwrap();
        let b = Rng::new(43).gaussian_matrix(4, 4).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Rng::new(1).gaussian_matrix(0, 3).is_err());
        assert!(Rng::new(1).gaussian_matrix(3, 0).is_err());
    }

    #[test]
    fn children_are_stable_and_distinct() {
        let root = Rng::new(7);
        assert_eq!(root.child("data").seed(), Rng::new(7).child("data").seed());
        assert_ne!(root.child("data").seed(), root.child("init").seed());
        assert_ne!(root.child("data").seed(), Rng::new(8).child("data").seed());
    }

    #[test]
    fn stream_prefix_is_frozen() {
        // Guards against silent changes in the generator or seeding path.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 13080132717333068652);
        assert_eq!(r.next_u64(), 8594738769458413623);
        let mut r = Rng::new(42);
        assert_eq!(r.normal(), 0.47798123835102174);
        assert_eq!(r.normal(), 1.3340706102318078);
        assert_eq!(r.uniform(), 0.4275164028565197);
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(3);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let kurt = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / (n as f64 * var * var);
        let within_one = xs.iter().filter(|x| x.abs() < 1.0).count() as f64 / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
        assert!((kurt - 3.0).abs() < 0.05, "{kurt}");
        // P(|Z| < 1) = erf(1/√2).
        assert!((within_one - 0.682_689_492_137_086).abs() < 0.005, "{within_one}");
    }

    #[test]
    fn below_and_shuffle_stay_in_range() {
        let mut r = Rng::new(9);
        for n in 1..20 {
            assert!(r.below(n) < n);
        }
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
