//! Two-phase item-language model training at desk scale.
//!
//! Phase 1 aligns collaborative-filtering item embeddings with text through a
//! Q-Former encoder; phase 2 fuses the aligned representations into a frozen
//! generative-retrieval decoder through a linear projector. The crate also
//! carries the supporting pieces: a reverse-mode autodiff tensor library, an
//! implicit-ALS factorizer, data preparation, beam-search evaluation, and a
//! config-driven pipeline driver.
//!
//! All numeric code is generic over the scalar type ([`Scalar`], f32/f64);
//! the aliases below pin the two instantiations used in practice.

pub mod backbone;
pub mod beam;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod mf;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod qformer;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{IlmError, Result};
pub use scalar::Scalar;

/// Scalar type used by training runs.
pub type TrainScalar = f32;
/// Scalar type used by gradient checks and the matrix factorizer.
pub type CheckScalar = f64;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
