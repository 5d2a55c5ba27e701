//! Spiking neural networks with binary, ternary and trainable-ternary LIF
//! neurons.
//!
//! The crate covers the whole loop: a small tensor library with a gradient
//! tape, LIF neuron dynamics with surrogate gradients, a time-unrolled
//! network builder, a BPTT training loop, folding of learned spike
//! amplitudes into weights for deployment, information-capacity analysis,
//! and an operation-count energy model.

pub mod analysis;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod network;
pub mod neurons;
pub mod reparam;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
