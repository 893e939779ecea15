//! Network regression loss as a [`LossEvaluator`] over the weight vector.
//!
//! The loss is `1/(2n) Σ |F(x_t) − y_t|²` over a fixed dataset. Parameters
//! are the weight matrices only, flattened layer by layer, each row-major
//! (the order of [`Network::weights_flat`]); biases and batch-norm affine
//! parameters stay fixed.
//!
//! With frozen batch norm the evaluator caches one base forward pass and
//! answers single-coordinate probes and single-layer direction probes by
//! pushing only the changed activations forward, sample by sample. Any
//! other query falls back to a full forward pass.

use serde::{Deserialize, Serialize};

use super::estimator::LossEvaluator;
use super::ProbeError;
use crate::math::Matrix;
use crate::qnn::{Layer, Mode, NetGrads, Network};

/// How batch norm behaves while the loss is probed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnProbeMode {
    /// Statistics of the probe dataset at the base point, reused by every
    /// probe.
    #[default]
    Frozen,
    /// Batch statistics recomputed for every probe.
    Recompute,
}

impl BnProbeMode {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "frozen" => Ok(Self::Frozen),
            "recompute" => Ok(Self::Recompute),
            other => Err(format!("unknown batch-norm probe mode {other:?} (expected frozen or recompute)")),
        }
    }

    fn net_mode(self) -> Mode {
        match self {
            Self::Frozen => Mode::Inference,
            Self::Recompute => Mode::Training,
        }
    }
}

pub struct NetworkLoss {
    net: Network,
    inputs: Matrix,
    targets: Matrix,
    bn_mode: BnProbeMode,
    /// Start of each layer's weight block, plus the total.
    offsets: Vec<usize>,
    base: Option<Base>,
}

/// Cached pass at the base point. Index `i` of `acts_*` is the input of
/// layer `i`; the last entry is the network output.
struct Base {
    theta: Vec<f64>,
    loss: f64,
    acts_um: Vec<Matrix>,
    acts_sm: Vec<Vec<f64>>,
    z_um: Vec<Matrix>,
    z_sm: Vec<Vec<f64>>,
    residual_sm: Vec<f64>,
    tails: Vec<Tail>,
}

/// Closed form for single-unit changes in layer `layer` when what follows
/// is either the linear output, or a piecewise-linear layer and then the
/// linear output.
///
/// For sample `t` and unit `j`, an output change `d` of unit `j` inside
/// `bounds` moves no downstream unit across a breakpoint, and changes the
/// squared error by `alpha d² + 2 beta d`. Entries are unit-major, so a
/// probe sweeping the samples of one unit reads them in order.
struct Tail {
    layer: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl Tail {
    #[inline]
    fn delta_se(&self, k: usize, d: f64) -> Option<f64> {
        let inside = match &self.bounds {
            Some((lo, hi)) => lo[k] < d && d < hi[k],
            None => true,
        };
        inside.then(|| d * (d * self.alpha[k] + 2.0 * self.beta[k]))
    }
}

/// Distance kept from every breakpoint before the closed form is trusted.
const PIECE_MARGIN: f64 = 1e-9;

#[derive(Default)]
struct Scratch {
    cur: Vec<(usize, f64)>,
    next: Vec<(usize, f64)>,
    dz: Vec<f64>,
}

fn sample_major(m: &Matrix) -> Vec<f64> {
    m.transpose().into_vec()
}

/// Reorders `n` sample-major rows into unit-major order.
fn unit_major(v: &[f64], n: usize) -> Vec<f64> {
    let units = v.len() / n;
    let mut out = vec![0.0; v.len()];
    for (t, row) in v.chunks_exact(units).enumerate() {
        for (j, &x) in row.iter().enumerate() {
            out[j * n + t] = x;
        }
    }
    out
}

fn half_mse(out: &Matrix, targets: &Matrix) -> f64 {
    let sum: f64 = out.as_slice().iter().zip(targets.as_slice()).map(|(o, y)| (o - y) * (o - y)).sum();
    sum / (2.0 * out.cols() as f64)
}

impl NetworkLoss {
    /// Evaluator with the incremental engine enabled for frozen batch norm.
    pub fn new(net: &Network, inputs: Matrix, targets: Matrix, bn_mode: BnProbeMode) -> Result<Self, ProbeError> {
        let mut me = Self::without_cache(net, inputs, targets, bn_mode)?;
        if bn_mode == BnProbeMode::Frozen {
            me.base = Some(me.build_base());
        }
        Ok(me)
    }

    /// Evaluator that answers every query with a full forward pass.
    pub fn without_cache(
        net: &Network,
        inputs: Matrix,
        targets: Matrix,
        bn_mode: BnProbeMode,
    ) -> Result<Self, ProbeError> {
        if inputs.cols() == 0 {
            return Err(ProbeError::Invalid("probe dataset is empty".into()));
        }
        if targets.shape() != (net.output_dim(), inputs.cols()) {
            return Err(ProbeError::Invalid(format!(
                "targets are {}x{}, expected {}x{}",
                targets.rows(),
                targets.cols(),
                net.output_dim(),
                inputs.cols()
            )));
        }
        let mut net = net.clone();
        match bn_mode {
            BnProbeMode::Frozen => net.freeze_batch_norm(&inputs)?,
            BnProbeMode::Recompute => net.set_mode(Mode::Training),
        }
        // Surfaces shape errors once, up front.
        net.forward_frozen(&inputs, bn_mode.net_mode())?;
        let mut offsets = vec![0];
        for len in net.weight_block_lengths() {
            offsets.push(offsets.last().unwrap() + len);
        }
        Ok(Self { net, inputs, targets, bn_mode, offsets, base: None })
    }

    /// The evaluated network (batch norm frozen to the probe data when in
    /// frozen mode).
    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn bn_mode(&self) -> BnProbeMode {
        self.bn_mode
    }

    pub fn base_point(&self) -> Vec<f64> {
        self.net.weights_flat()
    }

    pub fn weight_block_lengths(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Backprop gradient of the loss at the base point, STE derivatives in
    /// place of quantizer derivatives.
    pub fn coarse_gradient(&self) -> Result<NetGrads, ProbeError> {
        let (out, cache) = self.net.forward_frozen(&self.inputs, self.bn_mode.net_mode())?;
        let grad = out.sub(&self.targets)?.scale(1.0 / self.inputs.cols() as f64);
        Ok(self.net.backward(&cache, &grad)?)
    }

    fn full_loss(&self, theta: &[f64]) -> f64 {
        let mut net = self.net.clone();
        if net.set_weights_flat(theta).is_err() {
            return f64::NAN;
        }
        match net.forward_frozen(&self.inputs, self.bn_mode.net_mode()) {
            Ok((out, _)) => half_mse(&out, &self.targets),
            Err(_) => f64::NAN,
        }
    }

    fn build_base(&self) -> Base {
        let layers = self.net.layers();
        let mut acts_um = vec![self.inputs.clone()];
        let mut z_um = Vec::with_capacity(layers.len());
        for layer in layers {
            let input = acts_um.last().unwrap();
            let mut z = layer.weights.matmul(input).expect("shapes checked at construction");
            if let Some(b) = &layer.bias {
                for (u, &bu) in b.iter().enumerate() {
                    z.row_mut(u).iter_mut().for_each(|v| *v += bu);
                }
            }
            let r = layer.replication;
            let out = Matrix::from_fn(layer.width(), z.cols(), |c, t| {
                layer.act.forward(layer.pre_activation(c, z.get(c / r, t)))
            });
            z_um.push(z);
            acts_um.push(out);
        }
        let out = acts_um.last().unwrap();
        let loss = half_mse(out, &self.targets);
        let residual_sm = sample_major(&out.sub(&self.targets).expect("target shape checked"));
        let z_sm: Vec<Vec<f64>> = z_um.iter().map(sample_major).collect();
        let tails = [self.build_tail(&z_sm, &residual_sm), self.build_head(&residual_sm), self.build_output(&residual_sm)].into_iter().flatten().collect();
        Base {
            theta: self.net.weights_flat(),
            loss,
            acts_sm: acts_um.iter().map(sample_major).collect(),
            z_sm,
            acts_um,
            z_um,
            residual_sm,
            tails,
        }
    }

    fn build_output(&self, residual_sm: &[f64]) -> Option<Tail> {
        let output = self.net.layers().last()?;
        if output.replication != 1 || output.bn.is_some() || !output.act.is_identity() {
            return None;
        }
        let layer = self.net.layers().len() - 1;
        let n = self.inputs.cols();
        Some(Tail { layer, alpha: vec![1.0; residual_sm.len()], beta: unit_major(residual_sm, n), bounds: None })
    }

    fn build_head(&self, residual_sm: &[f64]) -> Option<Tail> {
        let layers = self.net.layers();
        let p = layers.len().checked_sub(2)?;
        let (last_hidden, output) = (&layers[p], &layers[p + 1]);
        if last_hidden.replication != 1 || output.replication != 1 || output.bn.is_some() || !output.act.is_identity() {
            return None;
        }
        let (units, outs) = (last_hidden.units(), output.units());
        let n = self.inputs.cols();
        let norms: Vec<f64> = (0..units).map(|j| (0..outs).map(|o| output.weights.get(o, j).powi(2)).sum()).collect();
        let mut beta = vec![0.0; n * units];
        for t in 0..n {
            let res = &residual_sm[t * outs..(t + 1) * outs];
            let row = &mut beta[t * units..(t + 1) * units];
            for (o, &r) in res.iter().enumerate() {
                row.iter_mut().zip(output.weights.row(o)).for_each(|(b, &w)| *b += w * r);
            }
        }
        let alpha = norms.iter().flat_map(|&a| std::iter::repeat_n(a, n)).collect();
        Some(Tail { layer: p, alpha, beta: unit_major(&beta, n), bounds: None })
    }

    fn build_tail(&self, z_sm: &[Vec<f64>], residual_sm: &[f64]) -> Option<Tail> {
        let layers = self.net.layers();
        let p = layers.len().checked_sub(3)?;
        let (first, hidden, output) = (&layers[p], &layers[p + 1], &layers[p + 2]);
        let plain = |l: &Layer| l.replication == 1 && l.bn.is_none();
        if first.replication != 1 || !plain(hidden) || !plain(output) || !output.act.is_identity() {
            return None;
        }
        let (units, mid, outs) = (first.units(), hidden.units(), output.units());
        let n = self.inputs.cols();
        let mut alpha = vec![0.0; n * units];
        let mut beta = vec![0.0; n * units];
        let mut lo_all = vec![f64::NEG_INFINITY; n * units];
        let mut hi_all = vec![f64::INFINITY; n * units];
        let mut gain = vec![0.0; outs * units];
        for t in 0..n {
            let z = &z_sm[p + 1][t * mid..(t + 1) * mid];
            let res = &residual_sm[t * outs..(t + 1) * outs];
            let range = t * units..(t + 1) * units;
            let (lo, hi) = (&mut lo_all[range.clone()], &mut hi_all[range]);
            gain.iter_mut().for_each(|g| *g = 0.0);
            for (u, &zu) in z.iter().enumerate() {
                let w = hidden.weights.row(u);
                let Some((a, b, slope)) = hidden.act.linear_piece(zu) else {
                    lo[..].fill(0.0);
                    hi[..].fill(0.0);
                    continue;
                };
                let (down, up) = (a + PIECE_MARGIN - zu, b - PIECE_MARGIN - zu);
                for j in 0..units {
                    let wj = w[j];
                    let (l, h) = match wj.partial_cmp(&0.0) {
                        Some(std::cmp::Ordering::Greater) => (down / wj, up / wj),
                        Some(std::cmp::Ordering::Less) => (up / wj, down / wj),
                        _ => continue,
                    };
                    lo[j] = lo[j].max(l);
                    hi[j] = hi[j].min(h);
                }
                if slope != 0.0 {
                    for o in 0..outs {
                        let v = slope * output.weights.get(o, u);
                        let g = &mut gain[o * units..(o + 1) * units];
                        g.iter_mut().zip(w).for_each(|(g, &wj)| *g += v * wj);
                    }
                }
            }
            for j in 0..units {
                let (mut a, mut b) = (0.0, 0.0);
                for (o, &r) in res.iter().enumerate() {
                    let g = gain[o * units + j];
                    a += g * g;
                    b += g * r;
                }
                alpha[t * units + j] = a;
                beta[t * units + j] = b;
            }
        }
        Some(Tail {
            layer: p,
            alpha: unit_major(&alpha, n),
            beta: unit_major(&beta, n),
            bounds: Some((unit_major(&lo_all, n), unit_major(&hi_all, n))),
        })
    }

    fn layer_of(&self, coord: usize) -> usize {
        self.offsets.partition_point(|&o| o <= coord) - 1
    }

    /// Recomputes the output channels of unit `u` of layer `i` for sample
    /// `t` given its new weighted sum, recording changed channels.
    #[inline]
    fn emit(layer: &Layer, u: usize, znew: f64, old_out: impl Fn(usize) -> f64, changed: &mut Vec<(usize, f64)>) {
        let r = layer.replication;
        for c in u * r..(u + 1) * r {
            let a = layer.act.forward(layer.pre_activation(c, znew));
            let old = old_out(c);
            if a != old {
                changed.push((c, a - old));
            }
        }
    }

    /// Change in the squared error of sample `t` once the output changes of
    /// layer `from` held in `s.cur` are pushed through the rest of the net.
    fn propagate(&self, b: &Base, from: usize, t: usize, s: &mut Scratch) -> f64 {
        let layers = self.net.layers();
        for next in from + 1..layers.len() {
            let layer = &layers[next];
            let units = layer.units();
            let width = layer.width();
            let z = &b.z_sm[next][t * units..(t + 1) * units];
            let old = &b.acts_sm[next + 1][t * width..(t + 1) * width];
            s.next.clear();
            for (u, &zu) in z.iter().enumerate() {
                let w = layer.weights.row(u);
                let dz: f64 = s.cur.iter().map(|&(c, d)| w[c] * d).sum();
                if dz != 0.0 {
                    Self::emit(layer, u, zu + dz, |c| old[c], &mut s.next);
                }
            }
            std::mem::swap(&mut s.cur, &mut s.next);
            if s.cur.is_empty() {
                return 0.0;
            }
        }
        let out_dim = self.net.output_dim();
        let res = &b.residual_sm[t * out_dim..(t + 1) * out_dim];
        s.cur.iter().map(|&(o, d)| d * (d + 2.0 * res[o])).sum()
    }

    fn incremental_coordinate(&self, b: &Base, coord: usize, delta: f64) -> (f64, f64) {
        let i = self.layer_of(coord);
        let layer = &self.net.layers()[i];
        let local = coord - self.offsets[i];
        let (j, k) = (local / layer.fan_in(), local % layer.fan_in());
        let x_row = b.acts_um[i].row(k);
        let z_row = b.z_um[i].row(j);
        let out = &b.acts_um[i + 1];
        let tail = b.tails.iter().find(|tl| tl.layer == i);
        let n = self.inputs.cols();
        let mut s = Scratch::default();
        let mut sums = [0.0; 2];
        for (t, (&x, &z)) in x_row.iter().zip(z_row).enumerate() {
            if x == 0.0 {
                continue;
            }
            for (sum, step) in sums.iter_mut().zip([delta, -delta]) {
                s.cur.clear();
                Self::emit(layer, j, z + step * x, |c| out.get(c, t), &mut s.cur);
                let Some(&(_, d)) = s.cur.first() else { continue };
                let k = j * n + t;
                *sum += match tail.and_then(|tl| tl.delta_se(k, d)) {
                    Some(v) => v,
                    None => self.propagate(b, i, t, &mut s),
                };
            }
        }
        let n2 = 2.0 * self.inputs.cols() as f64;
        (b.loss + sums[0] / n2, b.loss + sums[1] / n2)
    }

    fn incremental_direction(&self, b: &Base, i: usize, direction: &[f64], scale: f64) -> (f64, f64) {
        let layer = &self.net.layers()[i];
        let (units, fan_in, width) = (layer.units(), layer.fan_in(), layer.width());
        let e = &direction[self.offsets[i]..self.offsets[i + 1]];
        let mut s = Scratch { dz: vec![0.0; units], ..Scratch::default() };
        let mut sums = [0.0; 2];
        for t in 0..self.inputs.cols() {
            let x = &b.acts_sm[i][t * fan_in..(t + 1) * fan_in];
            for (u, d) in s.dz.iter_mut().enumerate() {
                let er = &e[u * fan_in..(u + 1) * fan_in];
                *d = scale * er.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            let z = &b.z_sm[i][t * units..(t + 1) * units];
            let old = &b.acts_sm[i + 1][t * width..(t + 1) * width];
            for (sum, sign) in sums.iter_mut().zip([1.0, -1.0]) {
                s.cur.clear();
                for u in 0..units {
                    if s.dz[u] != 0.0 {
                        Self::emit(layer, u, z[u] + sign * s.dz[u], |c| old[c], &mut s.cur);
                    }
                }
                if !s.cur.is_empty() {
                    *sum += self.propagate(b, i, t, &mut s);
                }
            }
        }
        let n2 = 2.0 * self.inputs.cols() as f64;
        (b.loss + sums[0] / n2, b.loss + sums[1] / n2)
    }

    fn base_at(&self, theta: &[f64]) -> Option<&Base> {
        self.base.as_ref().filter(|b| b.theta == theta)
    }
}

impl LossEvaluator for NetworkLoss {
    fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        match self.base_at(theta) {
            Some(b) => b.loss,
            None => self.full_loss(theta),
        }
    }

    fn loss_shifted(&self, theta: &[f64], coord: usize, delta: f64) -> f64 {
        self.coordinate_pair(theta, coord, delta).0
    }

    fn coordinate_pair(&self, theta: &[f64], coord: usize, delta: f64) -> (f64, f64) {
        match self.base_at(theta) {
            Some(b) => self.incremental_coordinate(b, coord, delta),
            None => {
                let mut t = theta.to_vec();
                t[coord] = theta[coord] + delta;
                let plus = self.full_loss(&t);
                t[coord] = theta[coord] - delta;
                (plus, self.full_loss(&t))
            }
        }
    }

    fn direction_pair(&self, theta: &[f64], direction: &[f64], scale: f64) -> (f64, f64) {
        if let Some(b) = self.base_at(theta) {
            let touched: Vec<usize> = (0..self.offsets.len() - 1)
                .filter(|&i| direction[self.offsets[i]..self.offsets[i + 1]].iter().any(|&d| d != 0.0))
                .collect();
            match touched.as_slice() {
                [] => return (b.loss, b.loss),
                [i] => return self.incremental_direction(b, *i, direction, scale),
                _ => {}
            }
        }
        let plus: Vec<f64> = theta.iter().zip(direction).map(|(t, d)| t + scale * d).collect();
        let minus: Vec<f64> = theta.iter().zip(direction).map(|(t, d)| t - scale * d).collect();
        (self.full_loss(&plus), self.full_loss(&minus))
    }
}
