//! Quantized neural network laboratory.
//!
//! * [`math`]: dense matrices, seeded RNG, cosine similarity, quadrature.
//! * [`qnn`]: activation quantizers, straight-through estimators, batch
//!   norm, forward and coarse-gradient backward passes, checkpoints.
//! * [`probe`]: coordinate discrete gradient (CDG) and antithetic
//!   evolution-strategy gradient (ESG) estimators, and the cosine-similarity
//!   experiment comparing them with the coarse gradient.
//! * [`duo`]: BinaryDuo width planning, decoupling of L-level activations
//!   into binary ones, and equivalence checking.
//! * [`train`]: losses, AdamW, datasets, the training loop and the
//!   two-stage BinaryDuo pipeline.

pub mod duo;
pub mod math;
pub mod probe;
pub mod qnn;
pub mod train;
