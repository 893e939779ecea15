//! Cosine similarity between the coarse gradient and CDG / ESG on a toy
//! teacher-student regression.
//!
//! The harness draws `n` standard-normal inputs of dimension `m`, an
//! evaluating network and an independently initialized target network of
//! the same shape: `l` bias-free `m × m` weight layers, the first `l − 1`
//! followed by the configured activation and the last one linear.
//! Layers are labelled `fc1 … fcl`. The loss is the half mean squared error
//! between the two networks' outputs.
//!
//! Every random stream is a child of the configured seed, so runs that only
//! differ in activation share their data, weights and ESG directions.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::estimator::{cdg, esg, BlockLoss};
use super::netloss::{BnProbeMode, NetworkLoss};
use super::ProbeError;
use crate::math::{cosine_similarity, norm, Matrix, Rng};
use crate::qnn::{ActivationSpec, GradientBundle, LayerSpec, Network, Ste};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_SAMPLES: usize = 100_000;
pub const DEFAULT_ESG_SAMPLES: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alg1Config {
    /// Number of weight layers `l` (so `l − 1` hidden activations).
    pub hidden_layers: usize,
    pub width: usize,
    pub samples: usize,
    pub activation: ActivationSpec,
    pub seed: u64,
    pub bn_mode: BnProbeMode,
}

impl Default for Alg1Config {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            width: 32,
            samples: DEFAULT_SAMPLES,
            activation: ActivationSpec::binary(Ste::Relu1),
            seed: 0,
            bn_mode: BnProbeMode::Frozen,
        }
    }
}

impl Alg1Config {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.hidden_layers == 0 || self.width == 0 || self.samples == 0 {
            return Err(ProbeError::Invalid(format!(
                "layers, width and samples must be positive (got {}, {}, {})",
                self.hidden_layers, self.width, self.samples
            )));
        }
        self.activation.validate().map_err(ProbeError::Invalid)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = vec![LayerSpec::new(self.width, self.activation); self.hidden_layers - 1];
        specs.push(LayerSpec::new(self.width, ActivationSpec::identity()));
        specs
    }
}

/// One similarity measurement: per-layer and concatenated cosines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosimReport {
    /// `cdg` or `esg`.
    pub experiment: String,
    pub layers: Vec<String>,
    pub per_layer_cosim: Vec<f64>,
    pub total_cosim: f64,
    pub epsilon_or_sigma: f64,
    pub seed: u64,
    pub sample_count: usize,
    /// Directions per layer for ESG.
    pub esg_samples: Option<usize>,
    pub activation_desc: String,
    pub ste_desc: String,
}

pub const CSV_HEADER: &str = "experiment,activation,ste,epsilon_or_sigma,seed,samples,layer,cosine";

impl CosimReport {
    /// One row per layer, then a `total` row.
    pub fn csv_rows(&self) -> Vec<String> {
        let prefix = format!(
            "{},{},{},{},{},{}",
            self.experiment, self.activation_desc, self.ste_desc, self.epsilon_or_sigma, self.seed, self.sample_count
        );
        self.layers
            .iter()
            .zip(&self.per_layer_cosim)
            .map(|(l, c)| format!("{prefix},{l},{c}"))
            .chain(std::iter::once(format!("{prefix},total,{}", self.total_cosim)))
            .collect()
    }

    pub fn cosine_of(&self, layer: &str) -> Option<f64> {
        if layer == "total" {
            return Some(self.total_cosim);
        }
        self.layers.iter().position(|l| l == layer).map(|i| self.per_layer_cosim[i])
    }
}

pub fn write_csv(reports: &[CosimReport], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        for row in r.csv_rows() {
            writeln!(w, "{row}")?;
        }
    }
    Ok(())
}

/// Frozen dataset, target and evaluating network for one configuration.
pub struct Alg1Harness {
    cfg: Alg1Config,
    evaluator: NetworkLoss,
}

impl Alg1Harness {
    pub fn new(cfg: &Alg1Config) -> Result<Self, ProbeError> {
        cfg.validate()?;
        let root = Rng::new(cfg.seed);
        let inputs = root.child("alg1/data").gaussian_matrix(cfg.width, cfg.samples)?;
        let specs = cfg.layer_specs();
        let model = Network::random(cfg.width, &specs, &mut root.child("alg1/model"))?;
        let target = Network::random(cfg.width, &specs, &mut root.child("alg1/target"))?;
        Self::from_parts(cfg, &model, &target, inputs)
    }

    /// Harness over explicit networks and inputs; `target`'s outputs on
    /// `inputs` become the regression targets.
    pub fn from_parts(cfg: &Alg1Config, model: &Network, target: &Network, inputs: Matrix) -> Result<Self, ProbeError> {
        let targets = target.infer(&inputs)?;
        let evaluator = NetworkLoss::new(model, inputs, targets, cfg.bn_mode)?;
        Ok(Self { cfg: cfg.clone(), evaluator })
    }

    pub fn config(&self) -> &Alg1Config {
        &self.cfg
    }

    pub fn evaluator(&self) -> &NetworkLoss {
        &self.evaluator
    }

    pub fn layer_labels(&self) -> Vec<String> {
        (1..=self.evaluator.weight_block_lengths().len()).map(|i| format!("fc{i}")).collect()
    }

    pub fn coarse_gradient(&self) -> Result<GradientBundle, ProbeError> {
        Ok(self.evaluator.coarse_gradient()?.weight_bundle())
    }

    pub fn cdg_gradient(&self, epsilon: f64) -> Result<GradientBundle, ProbeError> {
        let g = cdg(&self.evaluator, &self.evaluator.base_point(), epsilon)?;
        Ok(GradientBundle::split(g, &self.evaluator.weight_block_lengths())?)
    }

    /// ESG run separately on each layer's weight block with `n_samples`
    /// directions, from a per-layer stream that does not depend on `sigma`.
    pub fn esg_gradient(&self, sigma: f64, n_samples: usize) -> Result<GradientBundle, ProbeError> {
        let theta = self.evaluator.base_point();
        let root = Rng::new(self.cfg.seed);
        let mut per_layer = Vec::new();
        let mut offset = 0;
        for (i, len) in self.evaluator.weight_block_lengths().into_iter().enumerate() {
            let block = BlockLoss::new(&self.evaluator, &theta, offset, len)?;
            let mut rng = root.child(&format!("alg1/esg/fc{}", i + 1));
            per_layer.push(esg(&block, block.base_block(), sigma, n_samples, &mut rng)?);
            offset += len;
        }
        Ok(GradientBundle::from_layers(per_layer))
    }

    pub fn cdg_report(&self, epsilon: f64) -> Result<CosimReport, ProbeError> {
        let reference = self.cdg_gradient(epsilon)?;
        self.report("cdg", epsilon, None, &reference)
    }

    pub fn esg_report(&self, sigma: f64, n_samples: usize) -> Result<CosimReport, ProbeError> {
        let reference = self.esg_gradient(sigma, n_samples)?;
        self.report("esg", sigma, Some(n_samples), &reference)
    }

    fn report(
        &self,
        experiment: &'static str,
        param: f64,
        esg_samples: Option<usize>,
        reference: &GradientBundle,
    ) -> Result<CosimReport, ProbeError> {
        let coarse = self.coarse_gradient()?;
        let labels = self.layer_labels();
        let mut per_layer = Vec::with_capacity(labels.len());
        for (label, (c, d)) in labels.iter().zip(coarse.per_layer.iter().zip(&reference.per_layer)) {
            per_layer.push(similarity(label, experiment, c, d)?);
        }
        let total = similarity("total", experiment, &coarse.total, &reference.total)?;
        Ok(CosimReport {
            experiment: experiment.into(),
            layers: labels,
            per_layer_cosim: per_layer,
            total_cosim: total,
            epsilon_or_sigma: param,
            seed: self.cfg.seed,
            sample_count: self.cfg.samples,
            esg_samples,
            activation_desc: self.cfg.activation.precision_label(),
            ste_desc: self.cfg.activation.ste.label(),
        })
    }
}

fn similarity(layer: &str, reference: &'static str, coarse: &[f64], other: &[f64]) -> Result<f64, ProbeError> {
    let undefined = |which| ProbeError::UndefinedSimilarity { layer: layer.into(), which };
    if norm(coarse) == 0.0 {
        return Err(undefined("coarse"));
    }
    if norm(other) == 0.0 {
        return Err(undefined(reference));
    }
    Ok(cosine_similarity(coarse, other)?)
}

/// Coarse gradient against CDG at one step size.
pub fn run_alg1_experiment(cfg: &Alg1Config, epsilon: f64) -> Result<CosimReport, ProbeError> {
    Alg1Harness::new(cfg)?.cdg_report(epsilon)
}

/// [`run_alg1_experiment`] at each step size, sharing one harness.
pub fn epsilon_sweep(cfg: &Alg1Config, epsilons: &[f64]) -> Result<Vec<CosimReport>, ProbeError> {
    let h = Alg1Harness::new(cfg)?;
    epsilons.iter().map(|&e| h.cdg_report(e)).collect()
}

/// Coarse gradient against ESG at each `sigma`, sharing one harness.
pub fn sigma_sweep(cfg: &Alg1Config, sigmas: &[f64], n_samples: usize) -> Result<Vec<CosimReport>, ProbeError> {
    let h = Alg1Harness::new(cfg)?;
    sigmas.iter().map(|&s| h.esg_report(s, n_samples)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(act: ActivationSpec, seed: u64) -> Alg1Config {
        Alg1Config { width: 8, samples: 2000, activation: act, seed, ..Alg1Config::default() }
    }

    #[test]
    fn linear_network_agrees_with_cdg() {
        let r = run_alg1_experiment(&small(ActivationSpec::full(Ste::Identity), 1), 1e-3).unwrap();
        assert_eq!(r.layers, vec!["fc1", "fc2", "fc3"]);
        assert!(r.total_cosim > 0.999_999, "{r:?}");
        assert_eq!(r.csv_rows().len(), 4);
    }

    #[test]
    fn single_step_sweep_equals_single_run() {
        let cfg = small(ActivationSpec::ternary(Ste::Relu1), 2);
        let one = run_alg1_experiment(&cfg, 1e-2).unwrap();
        let sweep = epsilon_sweep(&cfg, &[1e-2]).unwrap();
        assert_eq!(sweep, vec![one]);
    }

    #[test]
    fn identical_target_is_undefined() {
        let cfg = small(ActivationSpec::full(Ste::Relu1), 3);
        let mut rng = Rng::new(5);
        let net = Network::random(8, &cfg.layer_specs(), &mut rng).unwrap();
        let x = rng.gaussian_matrix(8, 100).unwrap();
        let h = Alg1Harness::from_parts(&cfg, &net, &net, x).unwrap();
        let err = h.cdg_report(1e-3).unwrap_err();
        assert!(matches!(err, ProbeError::UndefinedSimilarity { which: "coarse", .. }), "{err}");
    }

    #[test]
    fn esg_report_is_seed_deterministic() {
        let cfg = small(ActivationSpec::full(Ste::Relu1), 4);
        let a = sigma_sweep(&cfg, &[1e-2], 64).unwrap();
        let b = sigma_sweep(&cfg, &[1e-2], 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].esg_samples, Some(64));
    }

    #[test]
    fn csv_layout() {
        let r = CosimReport {
            experiment: "cdg".into(),
            layers: vec!["fc1".into()],
            per_layer_cosim: vec![0.5],
            total_cosim: 0.5,
            epsilon_or_sigma: 0.001,
            seed: 7,
            sample_count: 10,
            esg_samples: None,
            activation_desc: "binary".into(),
            ste_desc: "relu1".into(),
        };
        let mut out = Vec::new();
        write_csv(&[r], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            format!("{CSV_HEADER}\ncdg,binary,relu1,0.001,7,10,fc1,0.5\ncdg,binary,relu1,0.001,7,10,total,0.5\n")
        );
    }
}
