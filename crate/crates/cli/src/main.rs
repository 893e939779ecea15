//! `qnnlab`: experiment driver for gradient-mismatch probes, BinaryDuo
//! decoupling and training.
//!
//! Exit status: 0 success, 1 experiment or verification failure, 2 usage
//! error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use thiserror::Error;

use config::KeySpec;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn failure(e: impl std::fmt::Display) -> Self {
        CliError::Failure(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "qnnlab", version, about = "Quantized network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    /// Output directory (required here or in the config).
    #[arg(long)]
    out: Option<String>,
    /// Worker threads; affects wall-clock time only.
    #[arg(long)]
    workers: Option<String>,
}

/// Declares a subcommand's flags together with their config keys and
/// defaults.
macro_rules! command_args {
    ($name:ident { $($field:ident = $default:expr, $doc:expr;)* }) => {
        #[derive(Args, Clone)]
        pub struct $name {
            #[command(flatten)]
            common: Common,
            $(
                #[doc = $doc]
                #[arg(long)]
                $field: Option<String>,
            )*
        }

        impl $name {
            const KEYS: &'static [KeySpec] = &[$((stringify!($field), $default)),*];

            fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
                let mut v = vec![
                    ("seed", self.common.seed.clone()),
                    ("out", self.common.out.clone()),
                    ("workers", self.common.workers.clone()),
                ];
                $(v.push((stringify!($field), self.$field.clone()));)*
                v
            }
        }
    };
}

command_args!(CosimArgs {
    activation = "binary", "full, binary, ternary, 2bit or <L>level";
    ste = "relu1", "relu1, steep2, steep4, swishsign, poly or identity";
    layers = "3", "Weight layers in the probed network";
    width = "32", "Input and hidden width";
    samples = "100000", "Gaussian probe samples";
    reference = "cdg", "cdg or esg (without a sweep)";
    epsilon = "1e-3", "CDG step";
    sigma = "1e-2", "ESG smoothing scale";
    esg_samples = "1024", "ESG directions per layer";
    sweep = "none", "none, epsilon or sigma";
    values = "", "Comma-separated sweep values";
    bn_mode = "frozen", "frozen or recompute";
});

command_args!(DuoArgs {
    widths = "64,64", "Baseline hidden widths";
    mode = "half", "half or quarter";
    ste = "relu1", "STE used in every arm";
    dim = "32", "Input dimension of the mixture task";
    classes = "4", "Mixture classes";
    train_samples = "2000", "Training samples";
    test_samples = "500", "Test samples";
    separation = "3", "Class-mean separation";
    epochs = "30", "Epochs for baseline, pretrain and scratch arms";
    finetune_epochs = "10", "Fine-tuning epochs";
    lr = "1e-3", "Pretrain learning rate";
    finetune_lr = "", "Fine-tune learning rate (default 0.02 x lr)";
    weight_decay = "1e-4", "Pretrain weight decay (fine-tune uses 1/20)";
    batch_size = "64", "Mini-batch size";
    coupled_checkpoint = "", "Start from this pretrained coupled checkpoint";
});

command_args!(TrainArgs {
    widths = "64,64", "Hidden widths";
    activation = "binary", "full, binary, ternary, 2bit or <L>level";
    ste = "relu1", "STE";
    dim = "32", "Input dimension of the mixture task";
    classes = "4", "Mixture classes";
    train_samples = "2000", "Training samples";
    test_samples = "500", "Test samples";
    separation = "3", "Class-mean separation";
    epochs = "30", "Epochs";
    lr = "1e-3", "Learning rate";
    weight_decay = "1e-4", "Weight decay";
    batch_size = "64", "Mini-batch size";
});

command_args!(DecoupleArgs {
    input = "", "Coupled checkpoint";
    mode = "half", "half (shared weighted sums) or quarter (duplicated rows)";
});

command_args!(EquivArgs {
    coupled = "", "Coupled checkpoint";
    decoupled = "", "Decoupled checkpoint";
    map = "", "Optional DecoupleMap JSON";
    trials = "100", "Random input batches";
});

command_args!(CumdiffArgs {
    stes = "relu1,steep2,steep4,swishsign,poly", "STEs to integrate";
    levels = "2", "Quantizer levels";
});

#[derive(Subcommand)]
enum Command {
    /// Cosine similarity of the coarse gradient against CDG or ESG.
    Cosim(CosimArgs),
    /// Full BinaryDuo pipeline on the built-in mixture task.
    Duo(DuoArgs),
    /// Train one classifier on the built-in mixture task.
    Train(TrainArgs),
    /// Decouple a coupled checkpoint into binary activations.
    Decouple(DecoupleArgs),
    /// Check two checkpoints for output equivalence.
    Equiv(EquivArgs),
    /// Cumulative difference between binary activation and STEs.
    Cumdiff(CumdiffArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, result) = match &cli.command {
        Command::Cosim(a) => ("cosim", commands::run(&a.common, CosimArgs::KEYS, a.overrides(), commands::cosim)),
        Command::Duo(a) => ("duo", commands::run(&a.common, DuoArgs::KEYS, a.overrides(), commands::duo)),
        Command::Train(a) => ("train", commands::run(&a.common, TrainArgs::KEYS, a.overrides(), commands::train)),
        Command::Decouple(a) => {
            ("decouple", commands::run(&a.common, DecoupleArgs::KEYS, a.overrides(), commands::decouple))
        }
        Command::Equiv(a) => ("equiv", commands::run(&a.common, EquivArgs::KEYS, a.overrides(), commands::equiv)),
        Command::Cumdiff(a) => ("cumdiff", commands::run(&a.common, CumdiffArgs::KEYS, a.overrides(), commands::cumdiff)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Failure(m)) => {
            eprintln!("qnnlab {name}: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(m)) => {
            eprintln!("qnnlab {name}: {m}");
            let mut cmd = Cli::command();
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("{}", sub.render_usage());
            }
            eprintln!("Run `qnnlab {name} --help` for all settings.");
            ExitCode::from(2)
        }
    }
}
