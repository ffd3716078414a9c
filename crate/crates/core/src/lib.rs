//! Truncated transfer learning for convolutional backbones.
//!
//! The crate models CNN backbones as layer graphs with explicit truncation
//! points, performs model surgery for the four transfer strategies (full
//! finetuning, truncation, layer-wise finetuning, channel fusion), trains
//! the resulting models with a plateau-driven schedule, and analyses
//! representation transfer with singular-vector CCA. Everything numeric is
//! generic over [`scalar::Float`]; the aliases below fix the defaults.

pub mod actv;
pub mod config;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod scalar;
pub mod search;
pub mod surgery;
pub mod svcca;
pub mod synth;
pub mod training;
pub mod zoo;

pub use error::{Error, Result};
pub use scalar::Float;

pub use ndarray;

/// Scalar used for model weights, activations, and training.
pub type TrainScalar = f32;
/// Scalar used for correlation analysis, where conditioning matters.
pub type CcaScalar = f64;
