//! BinaryDuo: width planning, decoupling of L-level activations into
//! `L − 1` binary ones, and equivalence checking.
//!
//! A BN channel `γ x̂ + β` feeding `quantize(·, L)` is rewritten as `L − 1`
//! binary channels `γ x̂ + β + s_r` with shifts
//! `s_r = 0.5 − (2i − 1) / (2(L − 1))`, stored in ascending order. Since
//! `quantize(v, L)` is the mean of the `L − 1` shifted binary steps, each
//! outgoing weight is copied to every replica and scaled by `1 / (L − 1)`.
//! Replicas of unit `j` occupy channels `j·R .. (j+1)·R` with `R = L − 1`.
//!
//! Two layouts share this rule:
//! * [`DecoupleStyle::SharedSum`] keeps one weighted sum per source unit
//!   and fans it out to `R` BN/activation channels (half-width planning,
//!   never more weights than the baseline).
//! * [`DecoupleStyle::Duplicate`] also copies each unit's incoming weight
//!   row, giving every replica its own weights (quarter-width planning,
//!   restores the baseline widths exactly).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Matrix, Rng};
use crate::qnn::{thresholds, ActivationSpec, Layer, Mode, NetError, Network};

/// Pre-activations closer than this to a quantizer threshold are redrawn
/// during equivalence checks.
pub const THRESHOLD_MARGIN: f64 = 1e-9;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;
const BATCH: usize = 32;
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DuoError {
    #[error("baseline width must be at least 2, got {0}")]
    BaselineTooSmall(usize),
    #[error("planned coupled width for {baseline} ({mode:?}) is zero")]
    ZeroWidth { baseline: usize, mode: WidthMode },
    #[error("layer {layer}: activation has {levels} levels, nothing to decouple (need at least 3)")]
    NothingToDecouple { layer: usize, levels: u32 },
    #[error("layer {layer}: hidden activation is not quantized")]
    NotQuantized { layer: usize },
    #[error("layer {layer}: no batch norm before the activation")]
    MissingBatchNorm { layer: usize },
    #[error("layer {layer}: already replicated")]
    AlreadyReplicated { layer: usize },
    #[error("network is in training mode; decouple an inference-mode network with frozen statistics")]
    TrainingMode,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("could not draw threshold-free inputs after {0} attempts")]
    ThresholdAvoidance(usize),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthMode {
    Half,
    Quarter,
}

impl WidthMode {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "half" => Ok(Self::Half),
            "quarter" => Ok(Self::Quarter),
            other => Err(format!("unknown width mode {other:?} (expected half or quarter)")),
        }
    }

    /// Layout that pairs with this planning mode.
    pub fn style(self) -> DecoupleStyle {
        match self {
            Self::Half => DecoupleStyle::SharedSum,
            Self::Quarter => DecoupleStyle::Duplicate,
        }
    }
}

/// Coupled width for a baseline width: `⌊n/√2⌋` (half) or `⌊n/2⌋`
/// (quarter).
pub fn plan_width(n_baseline: usize, mode: WidthMode) -> Result<usize, DuoError> {
    if n_baseline < 2 {
        return Err(DuoError::BaselineTooSmall(n_baseline));
    }
    let w = match mode {
        WidthMode::Half => (n_baseline as f64 / std::f64::consts::SQRT_2).floor() as usize,
        WidthMode::Quarter => n_baseline / 2,
    };
    if w == 0 {
        return Err(DuoError::ZeroWidth { baseline: n_baseline, mode });
    }
    Ok(w)
}

/// BN-bias shifts for `levels` levels, ascending.
pub fn shifts(levels: u32) -> Vec<f64> {
    let steps = f64::from(levels - 1);
    let mut s: Vec<f64> = (1..levels).map(|i| 0.5 - (2.0 * f64::from(i) - 1.0) / (2.0 * steps)).collect();
    s.sort_by(f64::total_cmp);
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoupleStyle {
    SharedSum,
    Duplicate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoupledUnit {
    pub source_unit: usize,
    pub shift: f64,
    pub fanout_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMap {
    pub layer: usize,
    pub levels: u32,
    pub replication: usize,
    /// One entry per output channel of the decoupled layer.
    pub units: Vec<DecoupledUnit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoupleMap {
    pub style: DecoupleStyle,
    pub layers: Vec<LayerMap>,
}

impl DecoupleMap {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Rewrites every hidden L-level layer as `L − 1` binary channels per unit.
pub fn decouple(net: &Network, style: DecoupleStyle) -> Result<(Network, DecoupleMap), DuoError> {
    if net.mode() != Mode::Inference {
        return Err(DuoError::TrainingMode);
    }
    let layers = net.layers();
    let last = layers.len() - 1;
    for (i, l) in layers[..last].iter().enumerate() {
        match l.act.levels() {
            None => return Err(DuoError::NotQuantized { layer: i }),
            Some(levels) if levels < 3 => return Err(DuoError::NothingToDecouple { layer: i, levels }),
            Some(_) => {}
        }
        if l.bn.is_none() {
            return Err(DuoError::MissingBatchNorm { layer: i });
        }
        if l.replication != 1 {
            return Err(DuoError::AlreadyReplicated { layer: i });
        }
    }
    if last == 0 {
        return Err(DuoError::Shape("network has no hidden layers to decouple".into()));
    }

    let mut out = Vec::with_capacity(layers.len());
    let mut maps = Vec::new();
    // Replication of the previous layer's channels, applied to this layer's
    // incoming columns.
    let mut prev_r = 1;
    for (i, l) in layers.iter().enumerate() {
        let weights = expand_columns(&l.weights, prev_r);
        if i == last {
            out.push(Layer { weights, ..l.clone() });
            break;
        }
        let levels = l.act.levels().expect("checked above");
        let r = (levels - 1) as usize;
        let sh = shifts(levels);
        let scale = 1.0 / r as f64;
        let bn = l.bn.as_ref().expect("checked above");
        let mut new_bn = bn.clone();
        let widen = |v: &[f64], add_shift: bool| -> Vec<f64> {
            v.iter().flat_map(|&x| sh.iter().map(move |s| if add_shift { x + s } else { x })).collect()
        };
        new_bn.gamma = widen(&bn.gamma, false);
        new_bn.beta = widen(&bn.beta, true);
        new_bn.running_mean = widen(&bn.running_mean, false);
        new_bn.running_var = widen(&bn.running_var, false);
        let act = ActivationSpec::binary(l.act.ste);
        let layer = match style {
            DecoupleStyle::SharedSum => Layer { weights, bias: l.bias.clone(), bn: Some(new_bn), act, replication: r },
            DecoupleStyle::Duplicate => {
                let rows = Matrix::from_fn(weights.rows() * r, weights.cols(), |row, c| weights.get(row / r, c));
                Layer {
                    weights: rows,
                    bias: l.bias.as_ref().map(|b| widen(b, false)),
                    bn: Some(new_bn),
                    act,
                    replication: 1,
                }
            }
        };
        let units = (0..l.units())
            .flat_map(|j| sh.iter().map(move |&shift| DecoupledUnit { source_unit: j, shift, fanout_scale: scale }))
            .collect();
        maps.push(LayerMap { layer: i, levels, replication: r, units });
        out.push(layer);
        prev_r = r;
    }
    let decoupled = Network::new(net.input_dim(), out)?;
    Ok((decoupled, DecoupleMap { style, layers: maps }))
}

/// Copies every column `r` times, scaled by `1/r`.
fn expand_columns(w: &Matrix, r: usize) -> Matrix {
    if r == 1 {
        return w.clone();
    }
    let scale = 1.0 / r as f64;
    Matrix::from_fn(w.rows(), w.cols() * r, |row, c| w.get(row, c / r) * scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub max_abs_diff: f64,
    pub pass: bool,
    pub trials: usize,
}

/// Runs both networks in inference mode on `trials` Gaussian batches and
/// compares outputs. Samples whose pre-activation in either network lies
/// within [`THRESHOLD_MARGIN`] of a quantizer threshold are redrawn.
pub fn verify_equivalence(
    coupled: &Network,
    decoupled: &Network,
    map: Option<&DecoupleMap>,
    trials: usize,
    rng: &mut Rng,
) -> Result<Equivalence, DuoError> {
    if coupled.input_dim() != decoupled.input_dim() || coupled.output_dim() != decoupled.output_dim() {
        return Err(DuoError::Shape(format!(
            "networks map {}→{} and {}→{}",
            coupled.input_dim(),
            coupled.output_dim(),
            decoupled.input_dim(),
            decoupled.output_dim()
        )));
    }
    if let Some(m) = map {
        for lm in &m.layers {
            let width = decoupled.layers().get(lm.layer).map(Layer::width);
            if width != Some(lm.units.len()) {
                return Err(DuoError::Shape(format!(
                    "map describes {} channels for layer {}, network has {width:?}",
                    lm.units.len(),
                    lm.layer
                )));
            }
        }
    }
    let mut max = 0.0f64;
    for _ in 0..trials {
        let x = safe_batch(&[coupled, decoupled], rng)?;
        let a = coupled.infer(&x)?;
        let b = decoupled.infer(&x)?;
        max = max.max(a.max_abs_diff(&b).map_err(NetError::from)?);
    }
    Ok(Equivalence { max_abs_diff: max, pass: max <= EQUIVALENCE_TOLERANCE, trials })
}

fn near_threshold(nets: &[&Network], x: &Matrix) -> Result<Vec<bool>, DuoError> {
    let mut bad = vec![false; x.cols()];
    for net in nets {
        let (_, cache) = net.forward_frozen(x, Mode::Inference)?;
        for (i, l) in net.layers().iter().enumerate() {
            let Some(levels) = l.act.levels() else { continue };
            let th = thresholds(levels);
            let pre = cache.pre_activation(i);
            for c in 0..pre.rows() {
                for (t, &v) in pre.row(c).iter().enumerate() {
                    if th.iter().any(|&h| (v - h).abs() <= THRESHOLD_MARGIN) {
                        bad[t] = true;
                    }
                }
            }
        }
    }
    Ok(bad)
}

fn safe_batch(nets: &[&Network], rng: &mut Rng) -> Result<Matrix, DuoError> {
    let dim = nets[0].input_dim();
    let mut x = rng.gaussian_matrix(dim, BATCH).map_err(NetError::from)?;
    for _ in 0..MAX_REDRAWS {
        let bad = near_threshold(nets, &x)?;
        if !bad.contains(&true) {
            return Ok(x);
        }
        for (t, _) in bad.iter().enumerate().filter(|(_, b)| **b) {
            for r in 0..dim {
                x.set(r, t, rng.normal());
            }
        }
    }
    Err(DuoError::ThresholdAvoidance(MAX_REDRAWS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnn::{quantize, BatchNorm, LayerSpec, Ste};

    fn coupled(seed: u64, levels: u32, widths: &[usize]) -> Network {
        let mut rng = Rng::new(seed);
        let mut specs: Vec<LayerSpec> = widths
            .iter()
            .map(|&w| LayerSpec::new(w, ActivationSpec::quantized(levels, Ste::Relu1)).with_batch_norm())
            .collect();
        specs.push(LayerSpec::new(3, ActivationSpec::identity()).with_bias());
        let mut net = Network::random(5, &specs, &mut rng).unwrap();
        net.set_mode(Mode::Training);
        let x = rng.gaussian_matrix(5, 64).unwrap();
        net.freeze_batch_norm(&x).unwrap();
        for l in net.layers_mut() {
            if let Some(bn) = &mut l.bn {
                bn.beta.iter_mut().for_each(|b| *b = 0.5 + 0.2 * rng.normal());
                bn.gamma.iter_mut().for_each(|g| *g = 0.3 + 0.1 * rng.normal().abs());
            }
        }
        net
    }

    #[test]
    fn width_plans() {
        assert_eq!(plan_width(3, WidthMode::Half), Ok(2));
        assert_eq!(plan_width(512, WidthMode::Half), Ok(362));
        assert_eq!(plan_width(4, WidthMode::Quarter), Ok(2));
        assert_eq!(plan_width(1, WidthMode::Half), Err(DuoError::BaselineTooSmall(1)));
    }

    #[test]
    fn shift_sets() {
        assert_eq!(shifts(3), vec![-0.25, 0.25]);
        let s4 = shifts(4);
        assert_eq!(s4.len(), 3);
        for (a, b) in s4.iter().zip([-1.0 / 3.0, 0.0, 1.0 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shifted_steps_average_to_quantizer() {
        for levels in [3u32, 4, 8] {
            let sh = shifts(levels);
            let th = thresholds(levels);
            for i in 0..10_000 {
                let v = -0.5 + 2.0 * (i as f64 + 0.5) / 10_000.0;
                if th.iter().any(|h| (v - h).abs() < 1e-9) {
                    continue;
                }
                let mean = sh.iter().map(|s| quantize(v + s, 2)).sum::<f64>() / sh.len() as f64;
                assert!((mean - quantize(v, levels)).abs() < 1e-15, "L={levels} v={v}");
            }
        }
    }

    #[test]
    fn scalar_example_contributes_same_value() {
        // One ternary unit with BN output 0.7 and outgoing weight 2.2.
        let bn = BatchNorm { beta: vec![0.7], gamma: vec![1.0], ..BatchNorm::new(1) };
        let hidden = Layer {
            weights: Matrix::from_vec(1, 1, vec![0.0]).unwrap(),
            bias: None,
            bn: Some(bn),
            act: ActivationSpec::ternary(Ste::Relu1),
            replication: 1,
        };
        let head = Layer {
            weights: Matrix::from_vec(1, 1, vec![2.2]).unwrap(),
            bias: None,
            bn: None,
            act: ActivationSpec::identity(),
            replication: 1,
        };
        let net = Network::new(1, vec![hidden, head]).unwrap();
        let x = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        assert!((net.infer(&x).unwrap().get(0, 0) - 1.1).abs() < 1e-15);
        let (d, map) = decouple(&net, DecoupleStyle::SharedSum).unwrap();
        assert_eq!(d.layers()[1].weights.as_slice(), &[1.1, 1.1]);
        assert_eq!(map.layers[0].units[0].fanout_scale, 0.5);
        let (_, cache) = d.forward_frozen(&x, Mode::Inference).unwrap();
        let fired: Vec<f64> = cache.pre_activation(0).as_slice().iter().map(|&v| quantize(v, 2)).collect();
        assert_eq!(fired, vec![0.0, 1.0]);
        assert!((d.infer(&x).unwrap().get(0, 0) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn decoupled_networks_are_equivalent() {
        for (seed, levels) in [(1, 3), (2, 3), (3, 4)] {
            let net = coupled(seed, levels, &[6, 4]);
            for style in [DecoupleStyle::SharedSum, DecoupleStyle::Duplicate] {
                let (d, map) = decouple(&net, style).unwrap();
                assert_eq!(d.widths()[0], 6 * (levels as usize - 1));
                let eq = verify_equivalence(&net, &d, Some(&map), 20, &mut Rng::new(seed)).unwrap();
                assert!(eq.pass, "{eq:?}");
                assert_eq!(DecoupleMap::from_json(&map.to_json()).unwrap(), map);
                assert!(map.layers.iter().all(|l| l.units.iter().all(|u| u.fanout_scale * l.replication as f64 == 1.0)));
            }
        }
    }

    #[test]
    fn duplicate_style_restores_baseline_shape() {
        let net = coupled(4, 3, &[2, 2]);
        let (d, _) = decouple(&net, DecoupleStyle::Duplicate).unwrap();
        assert_eq!(d.widths(), vec![4, 4, 3]);
        assert_eq!(d.layers()[1].weights.shape(), (4, 4));
        let (s, _) = decouple(&net, DecoupleStyle::SharedSum).unwrap();
        assert_eq!(s.layers()[1].weights.shape(), (2, 4));
    }

    #[test]
    fn corrupted_shift_is_detected() {
        let net = coupled(5, 3, &[6, 4]);
        let (mut d, map) = decouple(&net, DecoupleStyle::SharedSum).unwrap();
        d.layers_mut()[0].bn.as_mut().unwrap().beta[1] += 0.5;
        let eq = verify_equivalence(&net, &d, Some(&map), 50, &mut Rng::new(1)).unwrap();
        assert!(!eq.pass);
        assert!(eq.max_abs_diff > 1e-3);
    }

    #[test]
    fn zero_weights_give_identical_outputs() {
        let mut net = coupled(6, 3, &[4]);
        for l in net.layers_mut() {
            l.weights.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        }
        let (d, map) = decouple(&net, DecoupleStyle::SharedSum).unwrap();
        let eq = verify_equivalence(&net, &d, Some(&map), 5, &mut Rng::new(2)).unwrap();
        assert_eq!(eq.max_abs_diff, 0.0);
        assert!(eq.pass);
    }

    #[test]
    fn dead_zone_stays_dead() {
        let mut net = coupled(7, 3, &[3]);
        let bn = net.layers_mut()[0].bn.as_mut().unwrap();
        bn.gamma.iter_mut().for_each(|g| *g = 1e-3);
        bn.beta.iter_mut().for_each(|b| *b = 0.1);
        let (d, _) = decouple(&net, DecoupleStyle::SharedSum).unwrap();
        let x = Rng::new(3).gaussian_matrix(5, 8).unwrap();
        let (_, cache) = d.forward_frozen(&x, Mode::Inference).unwrap();
        assert!(cache.pre_activation(0).as_slice().iter().all(|&v| quantize(v, 2) == 0.0));
    }

    #[test]
    fn preconditions_enforced() {
        let net = coupled(8, 2, &[3]);
        assert!(matches!(decouple(&net, DecoupleStyle::SharedSum), Err(DuoError::NothingToDecouple { .. })));
        let mut net = coupled(8, 3, &[3]);
        net.set_mode(Mode::Training);
        assert_eq!(decouple(&net, DecoupleStyle::SharedSum).unwrap_err(), DuoError::TrainingMode);
        let mut rng = Rng::new(1);
        let specs = [
            LayerSpec::new(3, ActivationSpec::ternary(Ste::Relu1)),
            LayerSpec::new(1, ActivationSpec::identity()),
        ];
        let plain = Network::random(2, &specs, &mut rng).unwrap();
        assert_eq!(decouple(&plain, DecoupleStyle::SharedSum).unwrap_err(), DuoError::MissingBatchNorm { layer: 0 });
        let (d, _) = decouple(&coupled(9, 3, &[3]), DecoupleStyle::SharedSum).unwrap();
        assert!(verify_equivalence(&d, &Network::random(4, &specs, &mut rng).unwrap(), None, 1, &mut rng).is_err());
    }
}
