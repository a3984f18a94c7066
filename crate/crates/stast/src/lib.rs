//! Speech-to-text translation with a decoupled acoustic/semantic encoder,
//! a CTC-spike shrink mechanism, an integrated weight-tied NMT path, and
//! cross-modal representation adaptation — plus a synthetic corpus
//! generator and an evaluation/ablation harness.
//!
//! Everything numeric is generic over the scalar type: `f64` for tests and
//! oracle checks, `f32` for training. See the type aliases below.

pub mod analysis;
pub mod autodiff;
pub mod bleu;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod loss;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngState;
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = autodiff::Tensor<f32>;
/// Test/oracle-precision tensor.
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
