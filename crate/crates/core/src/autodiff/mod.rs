//! Dense `f64` tensors with tape-based reverse-mode differentiation, a
//! parameter store, Adam, and the checkpoint codec.

pub mod checkpoint;
pub mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use layers::{init_linear, linear, mlp2};
pub use optim::{cosine_lr, Adam};
pub use params::{Param, ParamStore};
pub use tape::{BatchStats, BinaryKind, Gradients, NormStats, PoolKind, Tape, Var};
pub use tensor::{IndexMatrix, Tensor};

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Batch-norm epsilon.
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Running-statistics momentum of batch norm.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
