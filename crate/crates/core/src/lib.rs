//! Continual learning with orthogonal low-rank adapters on a tiny
//! decoder-only transformer.
//!
//! Per task, a pair of thin matrices (A: d×r, B: r×k) adapts the attention
//! query and value projections while the base weights stay frozen. New tasks
//! are pushed into a subspace orthogonal to every past task's adapter via a
//! Frobenius penalty on the Gram blocks AᵢᵀAₜ, past adapters are frozen, and
//! after training everything can be merged back into the dense weights.
//! The crate also ships the instruction-schema data pipeline, the sequential
//! training harness, and the forgetting metrics used to measure all of this.
//!
//! Numeric code is generic over the scalar type: `f32` for training and
//! checkpoints, `f64` for the finite-difference gradient oracles in tests.

pub mod analysis;
pub mod error;
pub mod gradcheck;
pub mod lora;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::tape::{Tape, TensorId};
pub use tensor::Tensor;

/// Training-precision aliases. Checkpoints always store 32-bit floats.
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
pub type Model32 = model::ModelWeights<f32>;

/// Shadow-precision aliases for gradient-check tests.
pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type Model64 = model::ModelWeights<f64>;
