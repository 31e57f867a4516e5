//! Small CPU tensor library with reverse-mode gradients.
//!
//! Values are `f64` throughout. Models keep their weights in a
//! [`ParamStore`]; a forward pass records ops on a fresh [`Tape`], and
//! [`Tape::backward`] writes gradients back into the store.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use param::{BufferUpdate, ParamId, ParamStore, Parameter};
pub use tape::{BatchNormIds, BatchNormOpts, Mode, Tape, Var};
pub use tensor::Tensor;
