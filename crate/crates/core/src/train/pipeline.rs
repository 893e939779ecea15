//! Two-stage BinaryDuo pipeline: pretrain a coupled ternary network,
//! decouple it into binary activations, verify, fine-tune; alongside a
//! baseline binary network and the decoupled architecture trained from
//! scratch.

use serde::{Deserialize, Serialize};

use super::data::{Dataset, Targets};
use super::fit::{accuracy, train, EpochRecord, Stage, TrainPlan};
use super::TrainError;
use crate::duo::{decouple, plan_width, verify_equivalence, DecoupleMap, Equivalence, WidthMode};
use crate::math::Rng;
use crate::qnn::{ActivationSpec, LayerSpec, Network, Ste};

/// Fine-tuning rate relative to pretraining, and weight-decay reduction.
pub const FINETUNE_LR_RATIO: f64 = 0.02;
pub const FINETUNE_DECAY_DIVISOR: f64 = 20.0;
const EQUIVALENCE_TRIALS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuoConfig {
    pub baseline_widths: Vec<usize>,
    pub mode: WidthMode,
    pub ste: Ste,
    pub pretrain: TrainPlan,
    pub finetune: TrainPlan,
    pub seed: u64,
}

impl DuoConfig {
    /// Pipeline with fine-tuning derived from `pretrain`: same batch size,
    /// rate scaled by [`FINETUNE_LR_RATIO`], decay divided by
    /// [`FINETUNE_DECAY_DIVISOR`].
    pub fn with_default_finetune(
        baseline_widths: Vec<usize>,
        mode: WidthMode,
        ste: Ste,
        pretrain: TrainPlan,
        finetune_epochs: usize,
        seed: u64,
    ) -> Self {
        let finetune = TrainPlan {
            epochs: finetune_epochs,
            learning_rate: pretrain.learning_rate * FINETUNE_LR_RATIO,
            weight_decay: pretrain.weight_decay / FINETUNE_DECAY_DIVISOR,
            lr_schedule: vec![],
            stage: Stage::Finetune,
            ..pretrain.clone()
        };
        Self { baseline_widths, mode, ste, pretrain, finetune, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuoOutcome {
    pub seed: u64,
    pub mode: WidthMode,
    pub baseline_acc: f64,
    pub coupled_acc: f64,
    pub decoupled_acc_pre_ft: f64,
    pub decoupled_acc_post_ft: f64,
    pub scratch_acc: f64,
    pub baseline_params: usize,
    pub coupled_params: usize,
    pub decoupled_params: usize,
    pub baseline_widths: Vec<usize>,
    pub coupled_widths: Vec<usize>,
    pub decoupled_widths: Vec<usize>,
    pub equivalence: Equivalence,
    pub history: Vec<EpochRecord>,
}

/// Networks produced by [`run_binaryduo`], for checkpointing.
pub struct DuoNetworks {
    pub baseline: Network,
    pub coupled: Network,
    pub decoupled: Network,
    pub finetuned: Network,
    pub scratch: Network,
    pub map: DecoupleMap,
}

/// Hidden FC (no bias) → BN → activation layers, then a biased linear head.
pub fn classifier_specs(widths: &[usize], act: ActivationSpec, classes: usize) -> Vec<LayerSpec> {
    let mut specs: Vec<LayerSpec> = widths.iter().map(|&w| LayerSpec::new(w, act).with_batch_norm()).collect();
    specs.push(LayerSpec::new(classes, ActivationSpec::identity()).with_bias());
    specs
}

fn classes_of(data: &Dataset) -> Result<usize, TrainError> {
    match data.targets() {
        Targets::Classes { classes, .. } => Ok(*classes),
        Targets::Regression(_) => Err(TrainError::InvalidPlan("BinaryDuo needs a classification dataset".into())),
    }
}

fn acc(net: &Network, data: &Dataset) -> Result<f64, TrainError> {
    Ok(accuracy(net, data)?.expect("classification data"))
}

pub fn run_binaryduo(cfg: &DuoConfig, train_set: &Dataset, test_set: &Dataset) -> Result<DuoOutcome, TrainError> {
    run_binaryduo_with(cfg, train_set, test_set, None).map(|(o, _)| o)
}

/// [`run_binaryduo`], optionally starting from an already pretrained coupled
/// network instead of training one.
pub fn run_binaryduo_with(
    cfg: &DuoConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    coupled_start: Option<&Network>,
) -> Result<(DuoOutcome, DuoNetworks), TrainError> {
    let classes = classes_of(train_set)?;
    cfg.pretrain.validate()?;
    cfg.finetune.validate()?;
    if cfg.finetune.learning_rate >= cfg.pretrain.learning_rate {
        return Err(TrainError::FinetuneRate { finetune: cfg.finetune.learning_rate, pretrain: cfg.pretrain.learning_rate });
    }
    if cfg.baseline_widths.is_empty() {
        return Err(TrainError::InvalidPlan("at least one hidden layer is required".into()));
    }
    let coupled_widths =
        cfg.baseline_widths.iter().map(|&n| plan_width(n, cfg.mode)).collect::<Result<Vec<_>, _>>()?;
    let root = Rng::new(cfg.seed);
    let dim = train_set.dim();
    // Every arm shuffles with the same stream.
    let plan = |p: &TrainPlan, stage| TrainPlan { seed: cfg.seed, stage, ..p.clone() };
    let mut history = Vec::new();

    let baseline_init = Network::random(
        dim,
        &classifier_specs(&cfg.baseline_widths, ActivationSpec::binary(cfg.ste), classes),
        &mut root.child("init/baseline"),
    )?;
    let (baseline, h) = train(&baseline_init, train_set, Some(test_set), &plan(&cfg.pretrain, Stage::Baseline))?;
    history.extend(h);

    let coupled = match coupled_start {
        Some(net) => net.clone(),
        None => {
            let init = Network::random(
                dim,
                &classifier_specs(&coupled_widths, ActivationSpec::ternary(cfg.ste), classes),
                &mut root.child("init/coupled"),
            )?;
            let (net, h) = train(&init, train_set, Some(test_set), &plan(&cfg.pretrain, Stage::Pretrain))?;
            history.extend(h);
            net
        }
    };
    let (decoupled, map) = decouple(&coupled, cfg.mode.style())?;
    let equivalence = verify_equivalence(&coupled, &decoupled, Some(&map), EQUIVALENCE_TRIALS, &mut root.child("equivalence"))?;
    if !equivalence.pass {
        return Err(TrainError::NotEquivalent { max_abs_diff: equivalence.max_abs_diff });
    }
    let (finetuned, h) = train(&decoupled, train_set, Some(test_set), &plan(&cfg.finetune, Stage::Finetune))?;
    history.extend(h);

    let scratch_specs: Vec<LayerSpec> = decoupled
        .layers()
        .iter()
        .map(|l| {
            let mut s = LayerSpec::new(l.units(), l.act).replicated(l.replication);
            if l.bn.is_some() {
                s = s.with_batch_norm();
            }
            if l.bias.is_some() {
                s = s.with_bias();
            }
            s
        })
        .collect();
    let scratch_init = Network::random(dim, &scratch_specs, &mut root.child("init/scratch"))?;
    let (scratch, h) = train(&scratch_init, train_set, Some(test_set), &plan(&cfg.pretrain, Stage::Scratch))?;
    history.extend(h);

    let outcome = DuoOutcome {
        seed: cfg.seed,
        mode: cfg.mode,
        baseline_acc: acc(&baseline, test_set)?,
        coupled_acc: acc(&coupled, test_set)?,
        decoupled_acc_pre_ft: acc(&decoupled, test_set)?,
        decoupled_acc_post_ft: acc(&finetuned, test_set)?,
        scratch_acc: acc(&scratch, test_set)?,
        baseline_params: baseline.param_count(),
        coupled_params: coupled.param_count(),
        decoupled_params: decoupled.param_count(),
        baseline_widths: baseline.widths()[..cfg.baseline_widths.len()].to_vec(),
        coupled_widths,
        decoupled_widths: decoupled.widths()[..cfg.baseline_widths.len()].to_vec(),
        equivalence,
        history,
    };
    Ok((outcome, DuoNetworks { baseline, coupled, decoupled, finetuned, scratch, map }))
}

