use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use qnnlab::duo::{decouple as decouple_net, verify_equivalence, DecoupleMap, WidthMode};
use qnnlab::math::Rng;
use qnnlab::probe::{
    epsilon_sweep, run_alg1_experiment, sigma_sweep, write_csv, Alg1Config, BnProbeMode, CosimReport,
};
use qnnlab::qnn::checkpoint::{self, FORMAT_VERSION};
use qnnlab::qnn::{cumulative_difference, ActivationSpec, Network, Ste};
use qnnlab::train::{
    self as engine, accuracy, classifier_specs, gaussian_mixture, run_binaryduo_with, write_history, Dataset,
    DuoConfig, MixtureConfig, Stage, TrainPlan,
};

use crate::config::{KeySpec, Settings};
use crate::{CliError, Common};

type Outcome = Result<(), CliError>;

/// Resolves settings, prepares the output directory, writes the manifest
/// and runs `body` inside a pool of the configured size.
pub fn run(
    common: &Common,
    keys: &[KeySpec],
    overrides: Vec<(&'static str, Option<String>)>,
    body: fn(&Settings, &Path) -> Outcome,
) -> Outcome {
    let settings = Settings::resolve(common.config.as_deref(), keys, overrides)?;
    let out = PathBuf::from(settings.required("out")?);
    let workers: usize = settings.get("workers")?;
    if workers == 0 {
        return Err(CliError::Usage("`workers` must be at least 1".into()));
    }
    settings.get::<u64>("seed")?;
    fs::create_dir_all(&out).map_err(|e| CliError::Failure(format!("cannot create {}: {e}", out.display())))?;
    write(&out.join("config.txt"), settings.manifest())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(CliError::failure)?;
    pool.install(|| body(&settings, &out))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut s = serde_json::to_string_pretty(value).map_err(CliError::failure)?;
    s.push('\n');
    write(path, s)
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn activation(s: &Settings) -> Result<ActivationSpec, CliError> {
    let precision = ActivationSpec::parse_precision(s.raw("activation")).map_err(usage)?;
    let ste = Ste::parse(s.raw("ste")).map_err(usage)?;
    let act = ActivationSpec { precision, ste };
    act.validate().map_err(usage)?;
    Ok(act)
}

fn load_checkpoint(path: &str) -> Result<Network, CliError> {
    checkpoint::load(path).map_err(|e| {
        CliError::Failure(format!("cannot load {path}: {e} (expected qnnlab checkpoint format version {FORMAT_VERSION})"))
    })
}

fn save_checkpoint(net: &Network, path: &Path) -> Outcome {
    checkpoint::save(net, path).map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))
}

pub fn cosim(s: &Settings, out: &Path) -> Outcome {
    let cfg = Alg1Config {
        hidden_layers: s.get("layers")?,
        width: s.get("width")?,
        samples: s.get("samples")?,
        activation: activation(s)?,
        seed: s.get("seed")?,
        bn_mode: BnProbeMode::parse(s.raw("bn_mode")).map_err(usage)?,
    };
    cfg.validate().map_err(usage)?;
    let esg_samples: usize = s.get("esg_samples")?;
    let reports: Vec<CosimReport> = match s.raw("sweep") {
        "none" => match s.raw("reference") {
            "cdg" => vec![run_alg1_experiment(&cfg, s.get("epsilon")?).map_err(CliError::failure)?],
            "esg" => sigma_sweep(&cfg, &[s.get("sigma")?], esg_samples).map_err(CliError::failure)?,
            other => return Err(CliError::Usage(format!("unknown reference {other:?} (expected cdg or esg)"))),
        },
        "epsilon" => epsilon_sweep(&cfg, &sweep_values(s)?).map_err(CliError::failure)?,
        "sigma" => sigma_sweep(&cfg, &sweep_values(s)?, esg_samples).map_err(CliError::failure)?,
        other => return Err(CliError::Usage(format!("unknown sweep {other:?} (expected none, epsilon or sigma)"))),
    };
    let mut csv = Vec::new();
    write_csv(&reports, &mut csv).map_err(CliError::failure)?;
    write(&out.join("cosim.csv"), csv)?;
    write_json(&out.join("cosim.json"), &reports)
}

fn sweep_values(s: &Settings) -> Result<Vec<f64>, CliError> {
    let v: Vec<f64> = s.list("values")?;
    if v.is_empty() {
        return Err(CliError::Usage("a sweep needs --values".into()));
    }
    Ok(v)
}

fn mixture(s: &Settings) -> Result<(Dataset, Dataset), CliError> {
    let cfg = MixtureConfig {
        dim: s.get("dim")?,
        classes: s.get("classes")?,
        train: s.get("train_samples")?,
        test: s.get("test_samples")?,
        separation: s.get("separation")?,
    };
    gaussian_mixture(&cfg, s.get("seed")?).map_err(usage)
}

fn plan(s: &Settings, stage: Stage) -> Result<TrainPlan, CliError> {
    let p = TrainPlan {
        epochs: s.get("epochs")?,
        learning_rate: s.get("lr")?,
        weight_decay: s.get("weight_decay")?,
        lr_schedule: vec![],
        batch_size: s.get("batch_size")?,
        seed: s.get("seed")?,
        stage,
    };
    p.validate().map_err(usage)?;
    Ok(p)
}

fn widths(s: &Settings) -> Result<Vec<usize>, CliError> {
    let w: Vec<usize> = s.list("widths")?;
    if w.is_empty() || w.contains(&0) {
        return Err(CliError::Usage("`widths` needs positive entries".into()));
    }
    Ok(w)
}

pub fn duo(s: &Settings, out: &Path) -> Outcome {
    let (train_set, test_set) = mixture(s)?;
    let mode = WidthMode::parse(s.raw("mode")).map_err(usage)?;
    let ste = Ste::parse(s.raw("ste")).map_err(usage)?;
    let pretrain = plan(s, Stage::Pretrain)?;
    let mut cfg = DuoConfig::with_default_finetune(
        widths(s)?,
        mode,
        ste,
        pretrain,
        s.get("finetune_epochs")?,
        s.get("seed")?,
    );
    if s.optional("finetune_lr").is_some() {
        cfg.finetune.learning_rate = s.get("finetune_lr")?;
    }
    let start = s.optional("coupled_checkpoint").map(load_checkpoint).transpose()?;
    let (outcome, nets) = run_binaryduo_with(&cfg, &train_set, &test_set, start.as_ref()).map_err(CliError::failure)?;

    let mut history = Vec::new();
    write_history(&outcome.history, &mut history).map_err(CliError::failure)?;
    write(&out.join("history.csv"), history)?;
    write_json(&out.join("equivalence.json"), &outcome.equivalence)?;
    write(&out.join("decouple_map.json"), nets.map.to_json() + "\n")?;
    save_checkpoint(&nets.coupled, &out.join("coupled.ckpt"))?;
    save_checkpoint(&nets.decoupled, &out.join("decoupled.ckpt"))?;
    save_checkpoint(&nets.finetuned, &out.join("finetuned.ckpt"))?;
    let mut summary = serde_json::to_value(&outcome).map_err(CliError::failure)?;
    if let Some(obj) = summary.as_object_mut() {
        obj.remove("history");
    }
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "baseline {:.4}  coupled {:.4}  decoupled {:.4} -> {:.4}  scratch {:.4}",
        outcome.baseline_acc,
        outcome.coupled_acc,
        outcome.decoupled_acc_pre_ft,
        outcome.decoupled_acc_post_ft,
        outcome.scratch_acc
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    train_acc: f64,
    test_acc: f64,
    params: usize,
    widths: Vec<usize>,
}

pub fn train(s: &Settings, out: &Path) -> Outcome {
    let (train_set, test_set) = mixture(s)?;
    let act = activation(s)?;
    let classes: usize = s.get("classes")?;
    let specs = classifier_specs(&widths(s)?, act, classes);
    let seed: u64 = s.get("seed")?;
    let init = Network::random(train_set.dim(), &specs, &mut Rng::new(seed).child("init/train"))
        .map_err(CliError::failure)?;
    let p = plan(s, Stage::Pretrain)?;
    let (net, hist) = engine::train(&init, &train_set, Some(&test_set), &p).map_err(CliError::failure)?;
    let mut history = Vec::new();
    write_history(&hist, &mut history).map_err(CliError::failure)?;
    write(&out.join("history.csv"), history)?;
    save_checkpoint(&net, &out.join("model.ckpt"))?;
    let acc = |d: &Dataset| accuracy(&net, d).map_err(CliError::failure).map(|a| a.unwrap_or(f64::NAN));
    let summary =
        TrainSummary { train_acc: acc(&train_set)?, test_acc: acc(&test_set)?, params: net.param_count(), widths: net.widths() };
    write_json(&out.join("summary.json"), &summary)
}

pub fn decouple(s: &Settings, out: &Path) -> Outcome {
    let net = load_checkpoint(s.required("input")?)?;
    let mode = WidthMode::parse(s.raw("mode")).map_err(usage)?;
    let (d, map) = decouple_net(&net, mode.style()).map_err(CliError::failure)?;
    save_checkpoint(&d, &out.join("decoupled.ckpt"))?;
    write(&out.join("decouple_map.json"), map.to_json() + "\n")
}

pub fn equiv(s: &Settings, out: &Path) -> Outcome {
    let coupled = load_checkpoint(s.required("coupled")?)?;
    let decoupled = load_checkpoint(s.required("decoupled")?)?;
    let map = match s.optional("map") {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Failure(format!("cannot read {p}: {e}")))?;
            Some(DecoupleMap::from_json(&text).map_err(|e| CliError::Failure(format!("bad map {p}: {e}")))?)
        }
        None => None,
    };
    let mut rng = Rng::new(s.get("seed")?).child("equivalence");
    let eq = verify_equivalence(&coupled, &decoupled, map.as_ref(), s.get("trials")?, &mut rng)
        .map_err(CliError::failure)?;
    write_json(&out.join("equivalence.json"), &eq)?;
    if eq.pass {
        println!("equivalent (max |diff| = {:e})", eq.max_abs_diff);
        Ok(())
    } else {
        Err(CliError::Failure(format!("outputs differ (max |diff| = {:e})", eq.max_abs_diff)))
    }
}

pub fn cumdiff(s: &Settings, out: &Path) -> Outcome {
    let levels: u32 = s.get("levels")?;
    let stes: Vec<String> = s.list("stes")?;
    let mut csv = String::from("ste,levels,cumulative_difference\n");
    for name in &stes {
        let ste = Ste::parse(name).map_err(usage)?;
        let v = cumulative_difference(ste, levels).map_err(CliError::failure)?;
        csv.push_str(&format!("{},{levels},{v}\n", ste.label()));
    }
    write(&out.join("cumdiff.csv"), csv)
}
