#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod behavior;
pub mod diffcore;
pub mod env;
pub mod error;
pub mod models;
pub mod rl;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
