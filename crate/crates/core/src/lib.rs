//! Channel pruning for dense object detectors guided by box-aware gradient
//! saliency, with a self-contained toy detector, synthetic data and metrics.

pub mod ablate;
pub mod baselines;
pub mod data;
pub mod detector;
mod error;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod pruner;
pub mod reweight;
pub mod saliency;
mod scalar;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::{CompensatedSum, Scalar};
pub use tensor::Tensor;

/// Single-precision detector, used for training and inference.
pub type Detector32 = detector::Detector<f32>;
/// Double-precision detector, used for gradient checks and oracles.
pub type Detector64 = detector::Detector<f64>;
