//! Variational Bayesian neural networks for regression with a split of
//! predictive uncertainty into epistemic (weight) and aleatoric (data) parts.
//!
//! The crate contains a small reverse-mode differentiation engine, Gaussian
//! probability primitives, deterministic and reparameterized layers, four
//! model variants, an Adam trainer, multi-pass inference, a synthetic
//! age-regression generator, evaluation metrics and a command-line front-end.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod layers;
pub mod models;
pub mod par;
pub mod probability;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
