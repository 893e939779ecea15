//! Gradient-mismatch probes: smoothed-loss gradient estimators and the
//! coarse-gradient cosine-similarity experiment.

mod estimator;
mod experiment;
mod netloss;

use thiserror::Error;

use crate::math::MathError;
use crate::qnn::NetError;

pub use estimator::{cdg, esg, BlockLoss, FnLoss, LossEvaluator};
pub use experiment::{
    epsilon_sweep, run_alg1_experiment, sigma_sweep, write_csv, Alg1Config, Alg1Harness, CosimReport, CSV_HEADER,
    DEFAULT_EPSILON, DEFAULT_ESG_SAMPLES, DEFAULT_SAMPLES,
};
pub use netloss::{BnProbeMode, NetworkLoss};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe argument: {0}")]
    Invalid(String),
    #[error("loss is not finite when probing coordinate {coordinate}")]
    NonFiniteLoss { coordinate: usize },
    #[error("loss is not finite for ESG sample {sample}")]
    NonFiniteSample { sample: usize },
    #[error("cosine similarity undefined for {layer}: the {which} gradient is zero")]
    UndefinedSimilarity { layer: String, which: &'static str },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Math(#[from] MathError),
}
