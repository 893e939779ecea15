//! Losses returning `(value, d value / d prediction)`.

use super::TrainError;
use crate::math::Matrix;

/// `1/(2n) Σ (pred − target)²` over an `outputs × n` batch; gradient
/// `(pred − target) / n`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix), TrainError> {
    if pred.shape() != target.shape() {
        return Err(TrainError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.cols();
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let diff = pred.sub(target)?;
    let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / (2.0 * n as f64);
    Ok((loss, diff.scale(1.0 / n as f64)))
}

/// Mean softmax cross-entropy over the columns of `logits` (`classes × n`);
/// gradient `(softmax − one_hot) / n`.
pub fn softmax_xent_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix), TrainError> {
    let (classes, n) = logits.shape();
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    if labels.len() != n {
        return Err(TrainError::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::LabelOutOfRange { label: bad, classes });
    }
    let mut grad = Matrix::zeros(classes, n);
    let mut loss = 0.0;
    for (t, &label) in labels.iter().enumerate() {
        let max = (0..classes).map(|c| logits.get(c, t)).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..classes).map(|c| (logits.get(c, t) - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - logits.get(label, t);
        for c in 0..classes {
            let p = (logits.get(c, t) - log_sum).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            grad.set(c, t, (p - target) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// Index of the largest entry of each column; ties go to the lower index.
pub fn argmax_columns(m: &Matrix) -> Vec<usize> {
    (0..m.cols())
        .map(|t| {
            let mut best = 0;
            for c in 1..m.rows() {
                if m.get(c, t) > m.get(best, t) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;

    #[test]
    fn mse_examples() {
        let p = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let t = Matrix::zeros(1, 1);
        let (l, g) = mse_loss(&p, &t).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g.as_slice(), &[2.0]);
        let (l, g) = mse_loss(&p, &p).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(mse_loss(&Matrix::zeros(1, 0), &Matrix::zeros(1, 0)), Err(TrainError::EmptyBatch)));
    }

    fn central_difference(f: impl Fn(&Matrix) -> f64, at: &Matrix) -> Matrix {
        let h = 1e-5;
        Matrix::from_fn(at.rows(), at.cols(), |r, c| {
            let mut p = at.clone();
            p.set(r, c, at.get(r, c) + h);
            let mut m = at.clone();
            m.set(r, c, at.get(r, c) - h);
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let p = rng.gaussian_matrix(3, 5).unwrap();
        let t = rng.gaussian_matrix(3, 5).unwrap();
        let (_, g) = mse_loss(&p, &t).unwrap();
        let fd = central_difference(|q| mse_loss(q, &t).unwrap().0, &p);
        assert!(g.max_abs_diff(&fd).unwrap() <= 1e-8);
    }

    #[test]
    fn xent_examples() {
        let (l, g) = softmax_xent_loss(&Matrix::zeros(4, 3), &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        for t in 0..3 {
            assert!(g.column(t).iter().sum::<f64>().abs() < 1e-15);
        }
        let logits = Matrix::from_vec(2, 1, vec![1000.0, 0.0]).unwrap();
        let (l, _) = softmax_xent_loss(&logits, &[0]).unwrap();
        assert!(l < 1e-12);
        assert!(matches!(softmax_xent_loss(&logits, &[2]), Err(TrainError::LabelOutOfRange { label: 2, classes: 2 })));
    }

    #[test]
    fn xent_gradient_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let z = rng.gaussian_matrix(4, 6).unwrap();
        let labels = [0, 3, 2, 1, 1, 0];
        let (_, g) = softmax_xent_loss(&z, &labels).unwrap();
        let fd = central_difference(|q| softmax_xent_loss(q, &labels).unwrap().0, &z);
        assert!(g.max_abs_diff(&fd).unwrap() <= 1e-8);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let m = Matrix::from_vec(3, 2, vec![1.0, 0.0, 1.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_columns(&m), vec![0, 1]);
    }
}
