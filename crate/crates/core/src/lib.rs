//! Post-training quantization for transformer linear layers with
//! channel-wise salience balancing, rank-correlation-weighted temporal
//! calibration and offline re-parameterization.
//!
//! The crate is organised bottom-up:
//!
//! - [`quant`] -- uniform asymmetric quantizer, fake quantization and range fitting
//! - [`salience`] -- per-channel salience, balancing factors and their application
//! - [`temporal`] -- Spearman rank correlation and timestep-weighted salience
//! - [`reparam`] -- folding balancing factors into weights, adaLN MLPs and dequant scales
//! - [`sim`] -- a small diffusion-transformer block and synthetic calibration data
//! - [`pipeline`] -- config, tensor container, and the calibrate/quantize/evaluate stages
//!
//! Weights quantize per output channel (columns of a `d_in x d_out` matrix),
//! activations per tensor. Balancing acts on *input* channels, which is the
//! row axis of the weight and the column axis of the activation.

pub mod error;
pub mod pipeline;
pub mod quant;
pub mod reparam;
pub mod salience;
pub mod scalar;
pub mod sim;
pub mod temporal;

pub use error::{Result, SqError};
pub use quant::{Granularity, QuantParams, QuantizedTensor};
pub use reparam::{AdaLNParams, FoldedLinear};
pub use salience::{BalancingPair, SalienceVector};
pub use scalar::Scalar;
pub use temporal::{SpearmanWeights, TimestepActivations};

/// Crate version, recorded in report provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
