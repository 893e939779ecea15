//! Mini-batch training loop.

use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::data::{Dataset, Targets};
use super::loss::{argmax_columns, mse_loss, softmax_xent_loss};
use super::optim::{adamw_step, OptimState};
use super::TrainError;
use crate::math::{Matrix, Rng};
use crate::qnn::{Mode, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    Pretrain,
    Finetune,
    Scratch,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Baseline => "baseline",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Scratch => "scratch",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `(epoch, multiplier)`: from `epoch` on, the rate is
    /// `learning_rate * multiplier`. Before the first entry the multiplier
    /// is 1.
    pub lr_schedule: Vec<(usize, f64)>,
    pub batch_size: usize,
    /// Seeds the shuffling stream.
    pub seed: u64,
    pub stage: Stage,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidPlan(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        for (k, &(epoch, mult)) in self.lr_schedule.iter().enumerate() {
            if epoch >= self.epochs {
                return bad(format!("schedule epoch {epoch} outside 0..{}", self.epochs));
            }
            if k > 0 && epoch <= self.lr_schedule[k - 1].0 {
                return bad("schedule epochs must be strictly increasing".into());
            }
            if !(mult > 0.0 && mult.is_finite()) {
                return bad(format!("schedule multiplier {mult} must be positive"));
            }
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        let mult = self.lr_schedule.iter().take_while(|(e, _)| *e <= epoch).last().map_or(1.0, |&(_, m)| m);
        self.learning_rate * mult
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

pub const HISTORY_HEADER: &str = "stage,epoch,train_loss,train_acc,test_acc";

pub fn write_history(records: &[EpochRecord], mut w: impl Write) -> io::Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{},{},{}", r.stage, r.epoch, r.train_loss, opt(r.train_acc), opt(r.test_acc))?;
    }
    Ok(())
}

/// Fraction of samples whose argmax output matches the label, in inference
/// mode. `None` for regression data.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<Option<f64>, TrainError> {
    let Targets::Classes { labels, .. } = data.targets() else {
        return Ok(None);
    };
    let out = net.infer(data.inputs())?;
    let hits = argmax_columns(&out).iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(Some(hits as f64 / labels.len() as f64))
}

fn batch_loss(out: &Matrix, data: &Dataset, idx: &[usize]) -> Result<(f64, Matrix), TrainError> {
    match data.targets() {
        Targets::Regression(y) => mse_loss(out, &y.select_columns(idx)),
        Targets::Classes { labels, .. } => {
            let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            softmax_xent_loss(out, &l)
        }
    }
}

/// Trains a copy of `net` with AdamW on shuffled mini-batches. Classification
/// data uses softmax cross-entropy, regression data the half mean squared
/// error. Shuffling follows `Rng::new(plan.seed).child("data-order")`, so
/// two plans with the same seed see the same batches.
pub fn train(
    net: &Network,
    data: &Dataset,
    test: Option<&Dataset>,
    plan: &TrainPlan,
) -> Result<(Network, Vec<EpochRecord>), TrainError> {
    plan.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut net = net.clone();
    let mut history = Vec::with_capacity(plan.epochs);
    if plan.epochs == 0 {
        return Ok((net, history));
    }
    let mut rng = Rng::new(plan.seed).child("data-order");
    let mut state = OptimState::new(net.param_count(), plan.learning_rate, plan.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..plan.epochs {
        state.learning_rate = plan.rate_at(epoch);
        rng.shuffle(&mut order);
        net.set_mode(Mode::Training);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(plan.batch_size).enumerate() {
            let x = data.inputs().select_columns(idx);
            let (out, cache) = net.forward(&x)?;
            let (loss, grad) = batch_loss(&out, data, idx)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { stage: plan.stage, epoch, batch: b });
            }
            loss_sum += loss * idx.len() as f64;
            let grads = net.backward(&cache, &grad)?.bundle();
            let mut params = net.params();
            adamw_step(&mut params, &grads, &mut state).map_err(|e| match e {
                TrainError::NonFiniteGradient { .. } => TrainError::Diverged { stage: plan.stage, epoch, batch: b },
                other => other,
            })?;
            net.set_params(&params)?;
            if !running_stats_finite(&net) {
                return Err(TrainError::Diverged { stage: plan.stage, epoch, batch: b });
            }
        }
        net.set_mode(Mode::Inference);
        history.push(EpochRecord {
            stage: plan.stage,
            epoch,
            train_loss: loss_sum / data.len() as f64,
            train_acc: accuracy(&net, data)?,
            test_acc: match test {
                Some(t) => accuracy(&net, t)?,
                None => None,
            },
        });
    }
    Ok((net, history))
}

fn running_stats_finite(net: &Network) -> bool {
    net.layers().iter().filter_map(|l| l.bn.as_ref()).all(|bn| {
        bn.running_mean.iter().chain(&bn.running_var).all(|v| v.is_finite())
    })
}
