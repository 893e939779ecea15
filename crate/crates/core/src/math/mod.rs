//! Dense linear algebra, seeded randomness and numeric helpers.

mod matrix;
pub mod quad;
mod rng;

use thiserror::Error;

pub use matrix::{dot, norm, Matrix};
pub use rng::{gaussian_matrix, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("cosine similarity undefined: {0} has zero norm")]
    UndefinedSimilarity(&'static str),
    #[error("quadrature did not converge: achieved {achieved:e}, requested {requested:e}")]
    Quadrature { achieved: f64, requested: f64 },
}

/// `u·v / (|u| |v|)`, clamped into `[-1, 1]`.
///
/// A zero-norm operand is an error; callers divide by both norms and a
/// silent zero would hide a dead gradient.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, MathError> {
    if u.len() != v.len() {
        return Err(MathError::Shape(format!("vector lengths {} and {}", u.len(), v.len())));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 {
        return Err(MathError::UndefinedSimilarity("first vector"));
    }
    if nv == 0.0 {
        return Err(MathError::UndefinedSimilarity("second vector"));
    }
    let c = dot(u, v) / (nu * nv);
    if !c.is_finite() {
        return Err(MathError::NonFinite("cosine similarity".into()));
    }
    Ok(c.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[-1.0, -1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_vector_is_error() {
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(MathError::UndefinedSimilarity("first vector"))
        );
        assert!(cosine_similarity(&[1.0], &[0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-3.0..3.0f64, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-9 * scale);
        }

        #[test]
        fn cosine_with_positive_multiple_is_one(
            u in proptest::collection::vec(-10.0..10.0f64, 1..20),
            c in 1e-3..1e3f64,
        ) {
            prop_assume!(norm(&u) > 1e-6);
            let v: Vec<f64> = u.iter().map(|x| x * c).collect();
            let s = cosine_similarity(&u, &v).unwrap();
            prop_assert!(s > 0.0);
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn cosine_is_bounded(
            u in proptest::collection::vec(-10.0..10.0f64, 5),
            v in proptest::collection::vec(-10.0..10.0f64, 5),
        ) {
            prop_assume!(norm(&u) > 1e-9 && norm(&v) > 1e-9);
            let s = cosine_similarity(&u, &v).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
