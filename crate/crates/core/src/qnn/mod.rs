//! Quantized feed-forward networks: quantizers, STEs, batch norm, forward
//! and coarse-gradient backward passes, checkpoints.

pub mod activation;
pub mod batchnorm;
pub mod checkpoint;
pub mod network;

pub use activation::{cumulative_difference, quantize, thresholds, ActivationSpec, Precision, Ste};
pub use batchnorm::{BatchNorm, BatchStats};
pub use network::{
    ForwardCache, GradientBundle, Layer, LayerGrads, LayerSpec, Mode, NetError, NetGrads, Network,
};
