//! In-memory datasets: column-per-sample inputs with regression targets or
//! class labels.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::math::{Matrix, Rng};
use crate::qnn::Network;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Regression(Matrix),
    Classes { labels: Vec<usize>, classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Matrix,
    targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self, TrainError> {
        let n = inputs.cols();
        match &targets {
            Targets::Regression(y) if y.cols() != n => {
                return Err(TrainError::Shape(format!("{n} inputs but {} targets", y.cols())));
            }
            Targets::Classes { labels, .. } if labels.len() != n => {
                return Err(TrainError::Shape(format!("{n} inputs but {} labels", labels.len())));
            }
            Targets::Classes { labels, classes } => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(TrainError::LabelOutOfRange { label: bad, classes: *classes });
                }
            }
            Targets::Regression(_) => {}
        }
        Ok(Self { inputs, targets })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.targets, Targets::Classes { .. })
    }

    /// Samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let targets = match &self.targets {
            Targets::Regression(y) => Targets::Regression(y.select_columns(idx)),
            Targets::Classes { labels, classes } => {
                Targets::Classes { labels: idx.iter().map(|&i| labels[i]).collect(), classes: *classes }
            }
        };
        Dataset { inputs: self.inputs.select_columns(idx), targets }
    }

    /// Teacher-student regression: targets are `teacher`'s inference
    /// outputs on `inputs`.
    pub fn teacher_regression(teacher: &Network, inputs: Matrix) -> Result<Self, TrainError> {
        let y = teacher.infer(&inputs)?;
        Self::new(inputs, Targets::Regression(y))
    }
}

/// Seeded Gaussian-mixture classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub dim: usize,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    /// Expected distance between two class means, in units of the
    /// per-coordinate noise standard deviation.
    pub separation: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self { dim: 32, classes: 4, train: 2000, test: 500, separation: 3.0 }
    }
}

/// Balanced-in-expectation mixture: class means drawn once from
/// `N(0, separation²/(2·dim) I)`, labels uniform, noise `N(0, I)`.
/// Returns `(train, test)`.
pub fn gaussian_mixture(cfg: &MixtureConfig, seed: u64) -> Result<(Dataset, Dataset), TrainError> {
    if cfg.dim == 0 || cfg.classes < 2 || cfg.train == 0 || cfg.test == 0 {
        return Err(TrainError::InvalidPlan(format!("degenerate mixture {cfg:?}")));
    }
    let root = Rng::new(seed);
    let mut mrng = root.child("mixture/means");
    let spread = cfg.separation / (2.0 * cfg.dim as f64).sqrt();
    let means: Vec<Vec<f64>> =
        (0..cfg.classes).map(|_| (0..cfg.dim).map(|_| spread * mrng.normal()).collect()).collect();
    let draw = |label: &str, n: usize| -> Result<Dataset, TrainError> {
        let mut rng = root.child(label);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(cfg.classes)).collect();
        let mut x = Matrix::zeros(cfg.dim, n);
        for (t, &l) in labels.iter().enumerate() {
            for r in 0..cfg.dim {
                x.set(r, t, means[l][r] + rng.normal());
            }
        }
        Dataset::new(x, Targets::Classes { labels, classes: cfg.classes })
    };
    Ok((draw("mixture/train", cfg.train)?, draw("mixture/test", cfg.test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_is_seeded_and_shaped() {
        let cfg = MixtureConfig { train: 50, test: 20, ..MixtureConfig::default() };
        let (a, b) = gaussian_mixture(&cfg, 3).unwrap();
        assert_eq!((a.dim(), a.len(), b.len()), (32, 50, 20));
        assert_eq!(gaussian_mixture(&cfg, 3).unwrap().0, a);
        assert_ne!(gaussian_mixture(&cfg, 4).unwrap().0, a);
    }

    #[test]
    fn mismatched_counts_rejected() {
        let x = Matrix::zeros(2, 3);
        assert!(Dataset::new(x.clone(), Targets::Classes { labels: vec![0, 1], classes: 2 }).is_err());
        assert!(Dataset::new(x.clone(), Targets::Classes { labels: vec![0, 1, 2], classes: 2 }).is_err());
        assert!(Dataset::new(x, Targets::Regression(Matrix::zeros(1, 2))).is_err());
    }

    #[test]
    fn subset_keeps_order() {
        let x = Matrix::from_fn(1, 4, |_, c| c as f64);
        let d = Dataset::new(x, Targets::Classes { labels: vec![0, 1, 0, 1], classes: 2 }).unwrap();
        let s = d.subset(&[3, 0]);
        assert_eq!(s.inputs().as_slice(), &[3.0, 0.0]);
        assert_eq!(s.targets(), &Targets::Classes { labels: vec![1, 0], classes: 2 });
    }
}
