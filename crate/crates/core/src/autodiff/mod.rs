//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records one forward pass; parameters live in a [`ParamSet`]
//! and are copied onto the tape with [`Tape::param`]. After
//! [`Tape::backward_into`] their gradients are accumulated in place and
//! [`sgd_step`] applies the update.

pub mod checkpoint;
mod optim;
mod tape;
mod tensor;

pub use optim::{cosine_lr, sgd_step, OptimizerState, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::{Param, ParamId, ParamSet, Tensor};
