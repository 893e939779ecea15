//! Fully connected quantized networks with hand-written backprop.
//!
//! Activations are stored unit-major: a batch is a `features × samples`
//! matrix, one column per sample.
//!
//! A layer computes `units` weighted sums. With `replication = R > 1` each
//! sum feeds `R` consecutive batch-norm/activation channels
//! (`channel = unit * R + r`), so the layer emits `units * R` values while
//! the replicas share incoming weights. Decoupled BinaryDuo layers use this.
//!
//! Flat parameter order, used by every flatten/unflatten helper: layers in
//! order; within a layer the weight matrix row-major, then bias, then
//! gamma, then beta.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::activation::ActivationSpec;
use super::batchnorm::{BatchNorm, BatchStats};
use crate::math::{MathError, Matrix, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("stale forward cache: network parameters changed since the forward pass")]
    StaleCache,
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error(transparent)]
    Math(#[from] MathError),
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `units × fan_in`.
    pub weights: Matrix,
    pub bias: Option<Vec<f64>>,
    pub bn: Option<BatchNorm>,
    pub act: ActivationSpec,
    pub replication: usize,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn units(&self) -> usize {
        self.weights.rows()
    }

    /// Number of output channels, `units * replication`.
    pub fn width(&self) -> usize {
        self.units() * self.replication
    }

    pub fn weight_count(&self) -> usize {
        self.weights.rows() * self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count()
            + self.bias.as_ref().map_or(0, Vec::len)
            + self.bn.as_ref().map_or(0, |b| 2 * b.channels())
    }

    /// Pre-activation of channel `c` given the weighted sum of its unit, in
    /// inference mode.
    #[inline]
    pub fn pre_activation(&self, c: usize, z: f64) -> f64 {
        match &self.bn {
            Some(bn) => bn.infer(c, z),
            None => z,
        }
    }

    fn validate(&self, index: usize) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Invalid(format!("layer {index}: {m}")));
        if self.units() == 0 || self.fan_in() == 0 {
            return bad("empty weight matrix".into());
        }
        if self.replication == 0 {
            return bad("replication must be at least 1".into());
        }
        if let Some(b) = &self.bias {
            if b.len() != self.units() {
                return bad(format!("bias has {} entries for {} units", b.len(), self.units()));
            }
        }
        match &self.bn {
            Some(bn) => {
                if bn.channels() != self.width() || !bn.is_consistent() {
                    return bad(format!("batch norm does not match {} channels", self.width()));
                }
            }
            None if self.replication > 1 => {
                return bad("replicated channels need a batch norm to differ".into());
            }
            None => {}
        }
        self.act.validate().or_else(bad)
    }
}

/// Construction recipe for one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub units: usize,
    pub replication: usize,
    pub bias: bool,
    pub batch_norm: bool,
    pub act: ActivationSpec,
}

impl LayerSpec {
    pub fn new(units: usize, act: ActivationSpec) -> Self {
        Self { units, replication: 1, bias: false, batch_norm: false, act }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn with_batch_norm(mut self) -> Self {
        self.batch_norm = true;
        self
    }

    pub fn replicated(mut self, r: usize) -> Self {
        self.replication = r;
        self
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
    mode: Mode,
    #[serde(skip, default = "fresh_stamp")]
    stamp: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim && self.layers == other.layers && self.mode == other.mode
    }
}

/// Everything backward needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    stamp: u64,
    batch: usize,
    layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
struct LayerTrace {
    input: Matrix,
    /// Post-BN pre-activations, `channels × batch`.
    pre_act: Matrix,
    bn: Option<BnTrace>,
}

#[derive(Clone, Debug)]
struct BnTrace {
    xhat: Matrix,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Pre-activation matrix of layer `i` (after batch norm).
    pub fn pre_activation(&self, i: usize) -> &Matrix {
        &self.layers[i].pre_act
    }

    /// Input matrix of layer `i`.
    pub fn layer_input(&self, i: usize) -> &Matrix {
        &self.layers[i].input
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

impl LayerGrads {
    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weights.as_slice());
        for v in [&self.bias, &self.gamma, &self.beta].into_iter().flatten() {
            out.extend_from_slice(v);
        }
    }
}

/// Per-layer gradients from [`Network::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetGrads {
    /// All trainable parameters, in flat parameter order.
    pub fn bundle(&self) -> GradientBundle {
        GradientBundle::from_layers(
            self.layers
                .iter()
                .map(|l| {
                    let mut v = Vec::new();
                    l.flatten_into(&mut v);
                    v
                })
                .collect(),
        )
    }

    /// Weight matrices only, one row-major block per layer.
    pub fn weight_bundle(&self) -> GradientBundle {
        GradientBundle::from_layers(self.layers.iter().map(|l| l.weights.as_slice().to_vec()).collect())
    }
}

/// Per-layer flattened gradients plus their concatenation (layer order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub per_layer: Vec<Vec<f64>>,
    pub total: Vec<f64>,
}

impl GradientBundle {
    pub fn from_layers(per_layer: Vec<Vec<f64>>) -> Self {
        let total = per_layer.concat();
        Self { per_layer, total }
    }

    /// Splits a flat vector into blocks of the given lengths.
    pub fn split(total: Vec<f64>, lengths: &[usize]) -> Result<Self, MathError> {
        if lengths.iter().sum::<usize>() != total.len() {
            return Err(MathError::Shape(format!(
                "blocks sum to {} but vector has {}",
                lengths.iter().sum::<usize>(),
                total.len()
            )));
        }
        let mut per_layer = Vec::with_capacity(lengths.len());
        let mut at = 0;
        for &n in lengths {
            per_layer.push(total[at..at + n].to_vec());
            at += n;
        }
        Ok(Self { per_layer, total })
    }

    pub fn is_consistent(&self) -> bool {
        self.per_layer.iter().map(Vec::len).sum::<usize>() == self.total.len()
            && self.per_layer.concat() == self.total
    }
}

impl Network {
    /// Validates and assembles a network in inference mode.
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::Invalid("no layers".into()));
        }
        let mut fan_in = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            layer.validate(i)?;
            if layer.fan_in() != fan_in {
                return Err(NetError::Invalid(format!(
                    "layer {i} expects {} inputs but receives {fan_in}",
                    layer.fan_in()
                )));
            }
            fan_in = layer.width();
        }
        if !layers.last().is_some_and(|l| l.act.is_identity()) {
            return Err(NetError::Invalid("final layer activation must be identity".into()));
        }
        Ok(Self { input_dim, layers, mode: Mode::Inference, stamp: fresh_stamp() })
    }

    /// He-initialized network (`N(0, 2 / fan_in)` weights, zero biases,
    /// `gamma = 1`, `beta = 0`).
    pub fn random(input_dim: usize, specs: &[LayerSpec], rng: &mut Rng) -> Result<Self, NetError> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = input_dim;
        for spec in specs {
            if spec.units == 0 || fan_in == 0 {
                return Err(NetError::Invalid("zero-width layer".into()));
            }
            let std = (2.0 / fan_in as f64).sqrt();
            let mut w = rng.gaussian_matrix(spec.units, fan_in)?;
            w.as_mut_slice().iter_mut().for_each(|v| *v *= std);
            let width = spec.units * spec.replication;
            layers.push(Layer {
                weights: w,
                bias: spec.bias.then(|| vec![0.0; spec.units]),
                bn: spec.batch_norm.then(|| BatchNorm::new(width)),
                act: spec.act,
                replication: spec.replication,
            });
            fan_in = width;
        }
        Self::new(input_dim, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::width)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding forward caches.
    /// Structural edits are checked again by [`Network::validate`].
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }

    pub fn validate(&self) -> Result<(), NetError> {
        Self::new(self.input_dim, self.layers.clone()).map(|_| ())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Output widths of every layer.
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::width).collect()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(Layer::weight_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
            if let Some(bn) = &l.bn {
                out.extend_from_slice(&bn.gamma);
                out.extend_from_slice(&bn.beta);
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NetError> {
        if params.len() != self.param_count() {
            return Err(NetError::Shape(format!(
                "{} parameters supplied, network has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&params[at..at + dst.len()]);
            at += dst.len();
        };
        for l in self.layers_mut() {
            take(l.weights.as_mut_slice());
            if let Some(b) = &mut l.bias {
                take(b);
            }
            if let Some(bn) = &mut l.bn {
                take(&mut bn.gamma);
                take(&mut bn.beta);
            }
        }
        Ok(())
    }

    /// Weight matrices only, concatenated row-major in layer order.
    pub fn weights_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.as_slice().iter().copied()).collect()
    }

    pub fn weight_block_lengths(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::weight_count).collect()
    }

    pub fn set_weights_flat(&mut self, w: &[f64]) -> Result<(), NetError> {
        if w.len() != self.weight_count() {
            return Err(NetError::Shape(format!(
                "{} weights supplied, network has {}",
                w.len(),
                self.weight_count()
            )));
        }
        let mut at = 0;
        for l in self.layers_mut() {
            let n = l.weight_count();
            l.weights.as_mut_slice().copy_from_slice(&w[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Forward pass honoring the current mode. In training mode batch norm
    /// normalizes with batch statistics and updates the running statistics.
    pub fn forward(&mut self, batch: &Matrix) -> Result<(Matrix, ForwardCache), NetError> {
        let mode = self.mode;
        let (out, cache, stats) = self.run(batch, mode)?;
        if mode == Mode::Training {
            for (layer, s) in self.layers.iter_mut().zip(stats) {
                if let (Some(bn), Some(s)) = (&mut layer.bn, s) {
                    bn.update_running(&s);
                }
            }
        }
        Ok((out, cache))
    }

    /// Forward pass in the given mode without touching running statistics.
    pub fn forward_frozen(&self, batch: &Matrix, mode: Mode) -> Result<(Matrix, ForwardCache), NetError> {
        self.run(batch, mode).map(|(o, c, _)| (o, c))
    }

    /// Inference-mode output.
    pub fn infer(&self, batch: &Matrix) -> Result<Matrix, NetError> {
        self.run(batch, Mode::Inference).map(|(o, _, _)| o)
    }

    /// Batch statistics every batch-norm layer would see on `batch` in
    /// training mode.
    pub fn batch_statistics(&self, batch: &Matrix) -> Result<Vec<Option<BatchStats>>, NetError> {
        self.run(batch, Mode::Training).map(|(_, _, s)| s)
    }

    /// Sets every batch norm's running statistics to the exact statistics
    /// of `batch`, so inference mode reproduces training-mode normalization
    /// on that batch. Switches to inference mode.
    pub fn freeze_batch_norm(&mut self, batch: &Matrix) -> Result<(), NetError> {
        let stats = self.batch_statistics(batch)?;
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            if let (Some(bn), Some(s)) = (&mut layer.bn, s) {
                bn.freeze_to(&s);
            }
        }
        self.mode = Mode::Inference;
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        batch: &Matrix,
        mode: Mode,
    ) -> Result<(Matrix, ForwardCache, Vec<Option<BatchStats>>), NetError> {
        if batch.cols() == 0 {
            return Err(NetError::EmptyBatch);
        }
        if batch.rows() != self.input_dim {
            return Err(NetError::Shape(format!(
                "batch has {} features, network expects {}",
                batch.rows(),
                self.input_dim
            )));
        }
        let n = batch.cols();
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut all_stats = Vec::with_capacity(self.layers.len());
        let mut a = batch.clone();
        for layer in &self.layers {
            let mut z = layer.weights.matmul(&a)?;
            if let Some(b) = &layer.bias {
                for (u, &bu) in b.iter().enumerate() {
                    z.row_mut(u).iter_mut().for_each(|v| *v += bu);
                }
            }
            let r = layer.replication;
            let mut pre = if r == 1 {
                z
            } else {
                let mut e = Matrix::zeros(layer.width(), n);
                for c in 0..layer.width() {
                    e.row_mut(c).copy_from_slice(z.row(c / r));
                }
                e
            };
            let mut bn_trace = None;
            let mut stats = None;
            if let Some(bn) = &layer.bn {
                let channels = layer.width();
                let mut xhat = Matrix::zeros(channels, n);
                let mut inv_std = vec![0.0; channels];
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let row = pre.row(c);
                    let (mu, is) = match mode {
                        Mode::Training => {
                            let mu = row.iter().sum::<f64>() / n as f64;
                            let v = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
                            mean[c] = mu;
                            var[c] = v;
                            (mu, 1.0 / (v + bn.eps).sqrt())
                        }
                        Mode::Inference => (bn.running_mean[c], bn.running_inv_std(c)),
                    };
                    inv_std[c] = is;
                    let (g, b) = (bn.gamma[c], bn.beta[c]);
                    let xr = xhat.row_mut(c);
                    for (x, &p) in xr.iter_mut().zip(row) {
                        *x = (p - mu) * is;
                    }
                    let pr = pre.row_mut(c);
                    for (p, &x) in pr.iter_mut().zip(xhat.row(c)) {
                        *p = g * x + b;
                    }
                }
                if mode == Mode::Training {
                    stats = Some(BatchStats { mean, var, count: n });
                }
                bn_trace = Some(BnTrace { xhat, inv_std, batch_stats: mode == Mode::Training });
            }
            let mut out = pre.clone();
            if !layer.act.is_identity() {
                let act = layer.act;
                out.as_mut_slice().iter_mut().for_each(|v| *v = act.forward(*v));
            }
            traces.push(LayerTrace { input: a, pre_act: pre, bn: bn_trace });
            all_stats.push(stats);
            a = out;
        }
        Ok((a, ForwardCache { stamp: self.stamp, batch: n, layers: traces }, all_stats))
    }

    /// Backpropagates `loss_grad = dL/d(output)` through the cached pass.
    /// Every activation's local derivative is its STE derivative, so on
    /// quantized layers this yields the coarse gradient.
    pub fn backward(&self, cache: &ForwardCache, loss_grad: &Matrix) -> Result<NetGrads, NetError> {
        if cache.stamp != self.stamp || cache.layers.len() != self.layers.len() {
            return Err(NetError::StaleCache);
        }
        if loss_grad.shape() != (self.output_dim(), cache.batch) {
            return Err(NetError::Shape(format!(
                "loss gradient is {}x{}, expected {}x{}",
                loss_grad.rows(),
                loss_grad.cols(),
                self.output_dim(),
                cache.batch
            )));
        }
        let n = cache.batch;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d_out = loss_grad.clone();
        for (idx, (layer, trace)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let mut dh = d_out;
            if !layer.act.is_identity() {
                let act = layer.act;
                for (d, &p) in dh.as_mut_slice().iter_mut().zip(trace.pre_act.as_slice()) {
                    *d *= act.backward(p);
                }
            }
            let (mut gamma_g, mut beta_g) = (None, None);
            if let (Some(bn), Some(bt)) = (&layer.bn, &trace.bn) {
                let channels = layer.width();
                let mut gg = vec![0.0; channels];
                let mut bg = vec![0.0; channels];
                for c in 0..channels {
                    let xr = bt.xhat.row(c);
                    let dr = dh.row_mut(c);
                    gg[c] = dr.iter().zip(xr).map(|(d, x)| d * x).sum();
                    bg[c] = dr.iter().sum();
                    let g = bn.gamma[c];
                    let is = bt.inv_std[c];
                    if bt.batch_stats {
                        // dx = inv_std/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                        let sum_dx = g * bg[c];
                        let sum_dx_x = g * gg[c];
                        let nf = n as f64;
                        for (d, &x) in dr.iter_mut().zip(xr) {
                            *d = is / nf * (nf * g * *d - sum_dx - x * sum_dx_x);
                        }
                    } else {
                        dr.iter_mut().for_each(|d| *d *= g * is);
                    }
                }
                gamma_g = Some(gg);
                beta_g = Some(bg);
            }
            let dz = if layer.replication == 1 {
                dh
            } else {
                let r = layer.replication;
                let mut dz = Matrix::zeros(layer.units(), n);
                for c in 0..layer.width() {
                    let src = dh.row(c).to_vec();
                    dz.row_mut(c / r).iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
                dz
            };
            let w_grad = dz.matmul_bt(&trace.input)?;
            let bias_g = layer.bias.as_ref().map(|_| (0..layer.units()).map(|u| dz.row(u).iter().sum()).collect());
            d_out = if idx > 0 { layer.weights.matmul_at(&dz)? } else { Matrix::zeros(0, 0) };
            grads.push(LayerGrads { weights: w_grad, bias: bias_g, gamma: gamma_g, beta: beta_g });
        }
        grads.reverse();
        Ok(NetGrads { layers: grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnn::activation::Ste;

    fn linear(w: Matrix) -> Layer {
        Layer { weights: w, bias: None, bn: None, act: ActivationSpec::identity(), replication: 1 }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Network::new(3, vec![linear(Matrix::identity(3))]).unwrap();
        let x = Rng::new(1).gaussian_matrix(3, 5).unwrap();
        assert_eq!(net.infer(&x).unwrap(), x);
    }

    #[test]
    fn saturated_binary_layer_outputs_ones() {
        let hidden = Layer {
            weights: Matrix::from_vec(2, 1, vec![10.0, 20.0]).unwrap(),
            bias: None,
            bn: None,
            act: ActivationSpec::binary(Ste::Relu1),
            replication: 1,
        };
        let out = linear(Matrix::identity(2));
        let net = Network::new(1, vec![hidden, out]).unwrap();
        let x = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(net.infer(&x).unwrap().as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn final_layer_must_be_identity() {
        let l = Layer {
            weights: Matrix::identity(2),
            bias: None,
            bn: None,
            act: ActivationSpec::binary(Ste::Relu1),
            replication: 1,
        };
        assert!(matches!(Network::new(2, vec![l]), Err(NetError::Invalid(_))));
    }

    #[test]
    fn dimension_chain_is_checked() {
        let a = linear(Matrix::zeros(3, 2));
        let b = linear(Matrix::zeros(1, 4));
        assert!(Network::new(2, vec![a, b]).is_err());
    }

    #[test]
    fn empty_and_misshaped_batches_rejected() {
        let net = Network::new(2, vec![linear(Matrix::identity(2))]).unwrap();
        assert_eq!(net.infer(&Matrix::zeros(2, 0)), Err(NetError::EmptyBatch));
        assert!(matches!(net.infer(&Matrix::zeros(3, 1)), Err(NetError::Shape(_))));
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradients() {
        let mut rng = Rng::new(4);
        let specs = [
            LayerSpec::new(4, ActivationSpec::ternary(Ste::Relu1)).with_batch_norm(),
            LayerSpec::new(2, ActivationSpec::identity()).with_bias(),
        ];
        let mut net = Network::random(3, &specs, &mut rng).unwrap();
        net.set_mode(Mode::Training);
        let x = rng.gaussian_matrix(3, 6).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &Matrix::zeros(2, 6)).unwrap().bundle();
        assert!(g.total.iter().all(|&v| v == 0.0));
        assert_eq!(g.total.len(), net.param_count());
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = Rng::new(5);
        let specs = [LayerSpec::new(2, ActivationSpec::identity())];
        let mut net = Network::random(2, &specs, &mut rng).unwrap();
        let x = rng.gaussian_matrix(2, 3).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let w = net.weights_flat();
        net.set_weights_flat(&w).unwrap();
        assert_eq!(net.backward(&cache, &Matrix::zeros(2, 3)), Err(NetError::StaleCache));
    }

    #[test]
    fn dead_zone_blocks_gradient_into_earlier_layers() {
        // Pre-activations of the binary layer sit far above 0.5, where a
        // Steep(4) STE has zero slope.
        let first = Layer {
            weights: Matrix::from_vec(2, 2, vec![5.0, 0.0, 0.0, 5.0]).unwrap(),
            bias: None,
            bn: None,
            act: ActivationSpec::full(Ste::Identity),
            replication: 1,
        };
        let second = Layer {
            weights: Matrix::identity(2),
            bias: None,
            bn: None,
            act: ActivationSpec::binary(Ste::steep(4.0)),
            replication: 1,
        };
        let head = linear(Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        let net = Network::new(2, vec![first, second, head]).unwrap();
        let x = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, cache) = net.forward_frozen(&x, Mode::Inference).unwrap();
        let g = net.backward(&cache, &Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        assert!(g.layers[0].weights.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.layers[1].weights.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.layers[2].weights.as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn replicated_channels_share_weighted_sums() {
        let mut rng = Rng::new(6);
        let specs = [
            LayerSpec::new(3, ActivationSpec::binary(Ste::Relu1)).with_batch_norm().replicated(2),
            LayerSpec::new(1, ActivationSpec::identity()),
        ];
        let net = Network::random(4, &specs, &mut rng).unwrap();
        assert_eq!(net.widths(), vec![6, 1]);
        assert_eq!(net.layers()[1].fan_in(), 6);
        let x = rng.gaussian_matrix(4, 5).unwrap();
        let (_, cache) = net.forward_frozen(&x, Mode::Inference).unwrap();
        let pre = cache.pre_activation(0);
        for u in 0..3 {
            assert_eq!(pre.row(2 * u), pre.row(2 * u + 1));
        }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = Rng::new(8);
        let specs = [
            LayerSpec::new(3, ActivationSpec::ternary(Ste::Relu1)).with_batch_norm().with_bias(),
            LayerSpec::new(2, ActivationSpec::identity()).with_bias(),
        ];
        let mut net = Network::random(2, &specs, &mut rng).unwrap();
        let p: Vec<f64> = (0..net.param_count()).map(|i| i as f64).collect();
        net.set_params(&p).unwrap();
        assert_eq!(net.params(), p);
        assert!(net.set_params(&p[1..]).is_err());
    }
}
