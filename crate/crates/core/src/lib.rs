//! Self-distillation representation learning on small corpora, with
//! hyperspherical energy measurement and regularization.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod energy;
pub mod engine;
mod error;
pub mod eval;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod oracles;
pub mod parallel;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use parallel::ExecPolicy;
pub use tensor::Tensor;
