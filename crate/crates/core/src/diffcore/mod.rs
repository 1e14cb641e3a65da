//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! The op set is exactly what the five models and the training losses need:
//! matrix products, row-broadcast affine ops, embedding lookup, causal
//! masking, softmax/log-softmax, sigmoid-family nonlinearities, layer norm,
//! reductions and a few selection/concatenation ops. Parameters live in a
//! [`ParamStore`]; a fresh [`Tape`] is recorded for every forward pass.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Gradients, ParamStore, PARAMS_FORMAT};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{log_sigmoid, log_softmax_row, sigmoid, softmax_row};
