//! Losses, AdamW, datasets, the training loop and the BinaryDuo pipeline.

mod data;
mod fit;
mod loss;
mod optim;
mod pipeline;

use thiserror::Error;

use crate::duo::DuoError;
use crate::math::MathError;
use crate::qnn::NetError;

pub use data::{gaussian_mixture, Dataset, MixtureConfig, Targets};
pub use fit::{accuracy, train, write_history, EpochRecord, Stage, TrainPlan, HISTORY_HEADER};
pub use loss::{argmax_columns, mse_loss, softmax_xent_loss};
pub use optim::{adamw_step, OptimState};
pub use pipeline::{
    classifier_specs, run_binaryduo, run_binaryduo_with, DuoConfig, DuoNetworks, DuoOutcome, FINETUNE_DECAY_DIVISOR,
    FINETUNE_LR_RATIO,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("invalid training plan: {0}")]
    InvalidPlan(String),
    #[error("training diverged ({stage} stage, epoch {epoch}, batch {batch}): non-finite loss or gradient")]
    Diverged { stage: Stage, epoch: usize, batch: usize },
    #[error("fine-tune learning rate {finetune} must be below the pretrain rate {pretrain}")]
    FinetuneRate { finetune: f64, pretrain: f64 },
    #[error("decoupled network is not equivalent to the coupled one (max |diff| = {max_abs_diff:e})")]
    NotEquivalent { max_abs_diff: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Duo(#[from] DuoError),
    #[error(transparent)]
    Math(#[from] MathError),
}
