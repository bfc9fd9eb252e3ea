//! Layerwise adversarial training.
//!
//! Gradient-accumulation layers cache the sign of the loss gradient that
//! reached them on the previous mini-batch and add it, scaled by a per-layer
//! ε, to the next batch's activations. This crate provides the tensor and
//! autodiff machinery, the layer zoo, the training loop for every
//! perturbation mode, and the analysis tools used to measure robustness
//! (ε-sweeps, Jacobian spectra, first-order perturbation bounds).

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod nn;
pub mod repro;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
