//! Cost-sensitive adversarial training with optimal transport on the label
//! space.
//!
//! The crate bundles a small dense classifier with exact gradients
//! ([`nn`]), label-space transport solvers and the Wasserstein loss ([`ot`]),
//! PGD attacks that maximize either cross-entropy or the Wasserstein loss
//! ([`attacks`]), the outer training loop ([`training`]), evaluation metrics
//! ([`metrics`]) and dataset construction ([`data`]).

pub mod attacks;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod ot;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use nn::{Activation, Checkpoint, Gradients, MlpParams, MlpSpec, Prediction, Trace};
pub use ot::CostMatrix;
pub use tensor::Tensor;
