//! Smoothed-loss gradient estimators.
//!
//! * CDG: per-coordinate central difference with step `epsilon`, the exact
//!   gradient of the loss convolved with a rectangular kernel of half-width
//!   `epsilon` along each axis.
//! * ESG: antithetic Gaussian evolution-strategy estimator,
//!   `1/(2Nσ) Σ (f(θ+σεᵢ) − f(θ−σεᵢ)) εᵢ`.
//!
//! Both evaluate independent probes in parallel and write results by index,
//! so output never depends on the worker count.

use rayon::prelude::*;

use super::ProbeError;
use crate::math::Rng;

/// A pure scalar loss over a flat parameter vector.
///
/// Implementations must return identical values for identical inputs and be
/// callable from many threads at once. The `*_shifted` / `*_pair` hooks let
/// an implementation reuse work across probes; their defaults go through
/// [`LossEvaluator::loss`].
pub trait LossEvaluator: Sync {
    fn dim(&self) -> usize;

    fn loss(&self, theta: &[f64]) -> f64;

    /// `f(θ + delta·e_coord)`.
    fn loss_shifted(&self, theta: &[f64], coord: usize, delta: f64) -> f64 {
        let mut t = theta.to_vec();
        t[coord] += delta;
        self.loss(&t)
    }

    /// `(f(θ + δ·e_coord), f(θ − δ·e_coord))`.
    fn coordinate_pair(&self, theta: &[f64], coord: usize, delta: f64) -> (f64, f64) {
        (self.loss_shifted(theta, coord, delta), self.loss_shifted(theta, coord, -delta))
    }

    /// `(f(θ + s·d), f(θ − s·d))`.
    fn direction_pair(&self, theta: &[f64], direction: &[f64], scale: f64) -> (f64, f64) {
        let plus: Vec<f64> = theta.iter().zip(direction).map(|(t, d)| t + scale * d).collect();
        let minus: Vec<f64> = theta.iter().zip(direction).map(|(t, d)| t - scale * d).collect();
        (self.loss(&plus), self.loss(&minus))
    }
}

/// Wraps a closure as a [`LossEvaluator`].
pub struct FnLoss<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnLoss<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> LossEvaluator for FnLoss<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        (self.f)(theta)
    }
}

/// Restricts an evaluator to the contiguous block `offset..offset+len`,
/// holding every other coordinate at `base`.
pub struct BlockLoss<'a, L: ?Sized> {
    inner: &'a L,
    base: &'a [f64],
    offset: usize,
    len: usize,
}

impl<'a, L: LossEvaluator + ?Sized> BlockLoss<'a, L> {
    pub fn new(inner: &'a L, base: &'a [f64], offset: usize, len: usize) -> Result<Self, ProbeError> {
        if base.len() != inner.dim() || offset + len > base.len() {
            return Err(ProbeError::Invalid(format!(
                "block {offset}..{} outside a {}-dimensional evaluator",
                offset + len,
                inner.dim()
            )));
        }
        Ok(Self { inner, base, offset, len })
    }

    /// The block of `base` this view varies.
    pub fn base_block(&self) -> &'a [f64] {
        &self.base[self.offset..self.offset + self.len]
    }

    fn embed(&self, block: &[f64]) -> Vec<f64> {
        let mut full = self.base.to_vec();
        full[self.offset..self.offset + self.len].copy_from_slice(block);
        full
    }
}

impl<L: LossEvaluator + ?Sized> LossEvaluator for BlockLoss<'_, L> {
    fn dim(&self) -> usize {
        self.len
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        self.inner.loss(&self.embed(theta))
    }

    fn loss_shifted(&self, theta: &[f64], coord: usize, delta: f64) -> f64 {
        self.inner.loss_shifted(&self.embed(theta), self.offset + coord, delta)
    }

    fn coordinate_pair(&self, theta: &[f64], coord: usize, delta: f64) -> (f64, f64) {
        self.inner.coordinate_pair(&self.embed(theta), self.offset + coord, delta)
    }

    fn direction_pair(&self, theta: &[f64], direction: &[f64], scale: f64) -> (f64, f64) {
        let mut full_dir = vec![0.0; self.base.len()];
        full_dir[self.offset..self.offset + self.len].copy_from_slice(direction);
        self.inner.direction_pair(&self.embed(theta), &full_dir, scale)
    }
}

fn check_point<L: LossEvaluator + ?Sized>(loss: &L, theta: &[f64]) -> Result<(), ProbeError> {
    if theta.len() != loss.dim() {
        return Err(ProbeError::Invalid(format!(
            "parameter vector has {} entries, evaluator expects {}",
            theta.len(),
            loss.dim()
        )));
    }
    Ok(())
}

/// Coordinate discrete gradient: component `i` is
/// `(f(θ + ε e_i) − f(θ − ε e_i)) / 2ε`, using exactly `2·dim` evaluations.
pub fn cdg<L: LossEvaluator + ?Sized>(loss: &L, theta: &[f64], epsilon: f64) -> Result<Vec<f64>, ProbeError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(ProbeError::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    check_point(loss, theta)?;
    (0..theta.len())
        .into_par_iter()
        .map(|i| {
            let (plus, minus) = loss.coordinate_pair(theta, i, epsilon);
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(ProbeError::NonFiniteLoss { coordinate: i });
            }
            Ok((plus - minus) / (2.0 * epsilon))
        })
        .collect()
}

/// Directions are drawn in this many-sample chunks, then evaluated in
/// parallel.
const ESG_CHUNK: usize = 64;

/// Antithetic evolution-strategy gradient with `n_samples` Gaussian
/// directions (`2·n_samples` evaluations). Directions come from `rng` in
/// sample order.
pub fn esg<L: LossEvaluator + ?Sized>(
    loss: &L,
    theta: &[f64],
    sigma: f64,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>, ProbeError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ProbeError::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    if n_samples == 0 {
        return Err(ProbeError::Invalid("esg needs at least one sample".into()));
    }
    check_point(loss, theta)?;
    let d = theta.len();
    let mut grad = vec![0.0; d];
    let mut start = 0;
    while start < n_samples {
        let count = ESG_CHUNK.min(n_samples - start);
        let mut dirs = vec![0.0; count * d];
        rng.fill_normal(&mut dirs);
        let diffs: Vec<f64> = dirs
            .par_chunks(d)
            .enumerate()
            .map(|(i, dir)| {
                let (plus, minus) = loss.direction_pair(theta, dir, sigma);
                if !(plus.is_finite() && minus.is_finite()) {
                    return Err(ProbeError::NonFiniteSample { sample: start + i });
                }
                Ok(plus - minus)
            })
            .collect::<Result<_, _>>()?;
        for (diff, dir) in diffs.iter().zip(dirs.chunks(d)) {
            for (g, e) in grad.iter_mut().zip(dir) {
                *g += diff * e;
            }
        }
        start += count;
    }
    let scale = 1.0 / (2.0 * n_samples as f64 * sigma);
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn cdg_examples() {
        let sq = FnLoss::new(1, |t: &[f64]| t[0] * t[0]);
        assert_eq!(cdg(&sq, &[1.0], 0.5).unwrap(), vec![2.0]);
        for eps in [1e-4, 0.1, 3.0] {
            assert_eq!(cdg(&sq, &[0.0], eps).unwrap(), vec![0.0]);
        }
        let step = FnLoss::new(1, |t: &[f64]| if t[0] >= 0.3 { 1.0 } else { 0.0 });
        assert_eq!(cdg(&step, &[0.0], 0.5).unwrap(), vec![1.0]);
    }

    #[test]
    fn cdg_rejects_bad_input() {
        let sq = FnLoss::new(1, |t: &[f64]| t[0] * t[0]);
        assert!(cdg(&sq, &[0.0], 0.0).is_err());
        assert!(cdg(&sq, &[0.0, 1.0], 0.1).is_err());
        let blow = FnLoss::new(3, |t: &[f64]| if t[2] > 0.0 { f64::NAN } else { 0.0 });
        assert!(matches!(cdg(&blow, &[0.0; 3], 0.1), Err(ProbeError::NonFiniteLoss { coordinate: 2 })));
    }

    #[test]
    fn cdg_counts_evaluations() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let f = FnLoss::new(5, |t: &[f64]| {
            calls.fetch_add(1, Ordering::Relaxed);
            t.iter().sum()
        });
        cdg(&f, &[0.0; 5], 0.1).unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), 10);
    }

    #[test]
    fn esg_examples() {
        let constant = FnLoss::new(4, |_: &[f64]| 3.5);
        let g = esg(&constant, &[0.1, 0.2, 0.3, 0.4], 0.1, 100, &mut Rng::new(1)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let sq = FnLoss::new(1, |t: &[f64]| t[0] * t[0]);
        assert_eq!(esg(&sq, &[0.0], 0.3, 500, &mut Rng::new(2)).unwrap(), vec![0.0]);
        assert!(esg(&sq, &[0.0], 0.0, 5, &mut Rng::new(2)).is_err());
        assert!(esg(&sq, &[0.0], 0.1, 0, &mut Rng::new(2)).is_err());
    }

    #[test]
    fn esg_is_seed_deterministic() {
        let f = FnLoss::new(3, |t: &[f64]| t[0].sin() + t[1] * t[2]);
        let a = esg(&f, &[0.1, 0.2, 0.3], 0.05, 200, &mut Rng::new(9)).unwrap();
        let b = esg(&f, &[0.1, 0.2, 0.3], 0.05, 200, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn block_view_matches_full_evaluator() {
        let f = FnLoss::new(4, |t: &[f64]| t.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x * x).sum());
        let base = [1.0, 2.0, 3.0, 4.0];
        let block = BlockLoss::new(&f, &base, 1, 2).unwrap();
        assert_eq!(block.base_block(), &[2.0, 3.0]);
        let g = cdg(&block, block.base_block(), 0.25).unwrap();
        assert_eq!(g, vec![8.0, 18.0]);
        assert!(BlockLoss::new(&f, &base, 3, 2).is_err());
    }

    proptest! {
        #[test]
        fn cdg_is_exact_on_quadratics(
            diag in proptest::collection::vec(-3.0..3.0f64, 4),
            lin in proptest::collection::vec(-3.0..3.0f64, 4),
            theta in proptest::collection::vec(-2.0..2.0f64, 4),
            eps in 1e-3..1.0f64,
        ) {
            let (d2, l2) = (diag.clone(), lin.clone());
            let f = FnLoss::new(4, move |t: &[f64]| {
                t.iter().zip(&d2).zip(&l2).map(|((x, a), b)| a * x * x + b * x).sum::<f64>() + 0.5 * t[0] * t[1]
            });
            let g = cdg(&f, &theta, eps).unwrap();
            for i in 0..4 {
                let mut exact = 2.0 * diag[i] * theta[i] + lin[i];
                if i == 0 { exact += 0.5 * theta[1]; }
                if i == 1 { exact += 0.5 * theta[0]; }
                prop_assert!((g[i] - exact).abs() <= 1e-10 * (1.0 + exact.abs()), "{} vs {}", g[i], exact);
            }
        }

        #[test]
        fn cdg_antisymmetric_under_negation(theta in proptest::collection::vec(-2.0..2.0f64, 3), eps in 1e-3..0.5f64) {
            let f = |t: &[f64]| (t[0] * 3.0).floor() + t[1].powi(3) - t[2].abs();
            let pos = FnLoss::new(3, f);
            let neg = FnLoss::new(3, move |t: &[f64]| -f(t));
            let a = cdg(&pos, &theta, eps).unwrap();
            let b = cdg(&neg, &theta, eps).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }
}
