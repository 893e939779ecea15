//! Versioned binary checkpoints.
//!
//! Layout (all integers `u32` little-endian, all reals `f64` little-endian):
//!
//! ```text
//! magic        8 bytes  "QNNLABCK"
//! version      u32      FORMAT_VERSION
//! input_dim    u32
//! layer_count  u32
//! mode         u8       0 = training, 1 = inference
//! per layer:
//!   units, fan_in, replication       u32 x3
//!   levels                           u32 (0 = full precision)
//!   ste tag                          u8  (0 relu1, 1 steep, 2 swishsign, 3 poly, 4 identity)
//!   ste parameter                    f64 (slope / beta, 0 otherwise)
//!   flags                            u8  (bit 0 bias, bit 1 batch norm)
//!   weights                          f64 x units*fan_in, row-major
//!   bias                             f64 x units                 (if flagged)
//!   eps, momentum                    f64 x2                      (if batch norm)
//!   gamma, beta, mean, var           f64 x width each            (if batch norm)
//! ```
//!
//! No trailing bytes are allowed. Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::activation::{ActivationSpec, Precision, Ste};
use super::batchnorm::BatchNorm;
use super::network::{Layer, Mode, NetError, Network};
use crate::math::Matrix;

pub const MAGIC: &[u8; 8] = b"QNNLABCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint (format version {FORMAT_VERSION}): {0}")]
    Corrupt(String),
    #[error(transparent)]
    Network(#[from] NetError),
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, net.input_dim() as u32);
    put_u32(&mut out, net.layers().len() as u32);
    out.push(match net.mode() {
        Mode::Training => 0,
        Mode::Inference => 1,
    });
    for l in net.layers() {
        put_u32(&mut out, l.units() as u32);
        put_u32(&mut out, l.fan_in() as u32);
        put_u32(&mut out, l.replication as u32);
        put_u32(&mut out, l.act.levels().unwrap_or(0));
        let (tag, param) = match l.act.ste {
            Ste::Relu1 => (0u8, 0.0),
            Ste::Steep { slope } => (1, slope),
            Ste::SwishSign { beta } => (2, beta),
            Ste::Polynomial => (3, 0.0),
            Ste::Identity => (4, 0.0),
        };
        out.push(tag);
        put_f64s(&mut out, &[param]);
        out.push(u8::from(l.bias.is_some()) | (u8::from(l.bn.is_some()) << 1));
        put_f64s(&mut out, l.weights.as_slice());
        if let Some(b) = &l.bias {
            put_f64s(&mut out, b);
        }
        if let Some(bn) = &l.bn {
            put_f64s(&mut out, &[bn.eps, bn.momentum]);
            put_f64s(&mut out, &bn.gamma);
            put_f64s(&mut out, &bn.beta);
            put_f64s(&mut out, &bn.running_mean);
            put_f64s(&mut out, &bn.running_var);
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Network, CheckpointError> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version, expected: FORMAT_VERSION });
    }
    let input_dim = r.u32("input dimension")? as usize;
    let count = r.u32("layer count")? as usize;
    let mode = match r.take(1, "mode")?[0] {
        0 => Mode::Training,
        1 => Mode::Inference,
        other => return Err(CheckpointError::Corrupt(format!("unknown mode byte {other}"))),
    };
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let units = r.u32("layer units")? as usize;
        let fan_in = r.u32("layer fan-in")? as usize;
        let replication = r.u32("layer replication")? as usize;
        let levels = r.u32("activation levels")?;
        let tag = r.take(1, "ste tag")?[0];
        let param = r.f64s(1, "ste parameter")?[0];
        let ste = match tag {
            0 => Ste::Relu1,
            1 => Ste::Steep { slope: param },
            2 => Ste::SwishSign { beta: param },
            3 => Ste::Polynomial,
            4 => Ste::Identity,
            other => return Err(CheckpointError::Corrupt(format!("layer {i}: unknown STE tag {other}"))),
        };
        let precision = if levels == 0 { Precision::Full } else { Precision::Levels(levels) };
        let flags = r.take(1, "layer flags")?[0];
        if flags & !0b11 != 0 {
            return Err(CheckpointError::Corrupt(format!("layer {i}: unknown flag bits {flags:#04x}")));
        }
        let n_w = units
            .checked_mul(fan_in)
            .ok_or_else(|| CheckpointError::Corrupt(format!("layer {i}: absurd dimensions")))?;
        let weights = Matrix::from_vec(units, fan_in, r.f64s(n_w, "weights")?)
            .map_err(|e| CheckpointError::Corrupt(format!("layer {i}: {e}")))?;
        let bias = if flags & 1 != 0 { Some(r.f64s(units, "bias")?) } else { None };
        let bn = if flags & 2 != 0 {
            let width = units
                .checked_mul(replication)
                .ok_or_else(|| CheckpointError::Corrupt(format!("layer {i}: absurd replication")))?;
            let em = r.f64s(2, "batch norm constants")?;
            Some(BatchNorm {
                eps: em[0],
                momentum: em[1],
                gamma: r.f64s(width, "gamma")?,
                beta: r.f64s(width, "beta")?,
                running_mean: r.f64s(width, "running mean")?,
                running_var: r.f64s(width, "running variance")?,
            })
        } else {
            None
        };
        layers.push(Layer { weights, bias, bn, act: ActivationSpec { precision, ste }, replication });
    }
    if r.at != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    let mut net = Network::new(input_dim, layers)?;
    net.set_mode(mode);
    Ok(net)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(net))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let bytes = n.checked_mul(8).ok_or(CheckpointError::Truncated(what))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;
    use crate::qnn::network::LayerSpec;
    use proptest::prelude::*;

    fn sample_net(seed: u64) -> Network {
        let mut rng = Rng::new(seed);
        let specs = [
            LayerSpec::new(5, ActivationSpec::ternary(Ste::steep(2.0))).with_batch_norm(),
            LayerSpec::new(3, ActivationSpec::binary(Ste::swish_sign())).with_batch_norm().replicated(2),
            LayerSpec::new(2, ActivationSpec::identity()).with_bias(),
        ];
        let mut net = Network::random(4, &specs, &mut rng).unwrap();
        let x = rng.gaussian_matrix(4, 16).unwrap();
        net.set_mode(Mode::Training);
        net.forward(&x).unwrap();
        net
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in 0u64..1000) {
            let net = sample_net(seed);
            let bytes = encode(&net);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &net);
            prop_assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(&sample_net(1));
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("format version 7"), "{err}");
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample_net(2));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(decode(b"garbage!garbage!"), Err(CheckpointError::BadMagic)));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = sample_net(3);
        save(&net, &path).unwrap();
        assert_eq!(load(&path).unwrap(), net);
    }
}
