//! Error-compensating optimizers for quantized training.
//!
//! The crate keeps low-precision parameters as the only copy of the weights and
//! folds each step's quantization error back into the optimizer momentum, so
//! that updates smaller than the grid spacing are carried forward instead of
//! being lost. Baselines with high-precision master weights and with naive
//! master-weight removal are provided alongside, together with an executable
//! form of the convergence bounds and the one-dimensional stationary analysis.
//!
//! Module map:
//! - [`numerics`]: flat tensors, counter-based keyed randomness, vector statistics.
//! - [`quantize`]: grids, scale policies, rounding modes and granularities.
//! - [`optim`]: SGDM and Adam under master-weight, naive, compensated and exact regimes.
//! - [`theory`]: bounds, moment recursions, stationary solutions, Monte Carlo checks.
//! - [`harness`]: objectives with analytic gradients and the training loop.
//! - [`validation`]: the property suite behind `eco validate-theory`.

pub mod error;
pub mod harness;
pub mod numerics;
pub mod optim;
pub mod quantize;
pub mod theory;
pub mod validation;

pub use error::{EcoError, Result};
pub use numerics::{cosine_similarity, keyed_uniform, relative_norm, RngKey, Tensor};
pub use quantize::{
    quantize, Granularity, QuantGrid, QuantOutcome, QuantSpec, Rounding,
};
