//! Toy linear models, the AdamW inner optimizer and the ternary/int8 quantizers.

mod adamw;
mod params;
mod quant;
mod task;

use thiserror::Error;

pub use adamw::{inner_step, inner_step_mut, AdamWConfig, InnerOptimizerState};
pub use params::Params;
pub use quant::{
    dequantize, quantize_activations, quantize_weights, QuantActivations, Ternary,
    ACTIVATION_LEVELS, ZERO_SCALE_GUARD,
};
pub use task::{loss, loss_and_gradient, LossKind, ToyTask};
#[allow(unused_imports)]
pub(crate) use task::standard_normal;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QuantError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("{rows} input rows but {targets} targets")]
    RowMismatch { rows: usize, targets: usize },
    #[error("empty input")]
    Empty,
}
