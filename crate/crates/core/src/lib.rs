//! Disentangling robust and non-robust representations with adversarial
//! asymmetric training.
//!
//! A [`ThreeWayModel`](model::ThreeWayModel) encodes an image with two
//! encoders and classifies the concatenated (or zero-masked) representations
//! with a shared head. Training assigns asymmetric labels to the two
//! representations using the model's own misclassified adversarial examples.

pub mod analysis;
pub mod attack;
pub mod config;
pub mod data;
pub mod dilemma;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
