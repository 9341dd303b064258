//! Differentiable numeric kernels, finite-difference gradient checks and the
//! AdamW optimizer. Models in this crate write their backward passes by hand
//! on top of these pieces.

pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod optim;
mod tensor;

pub use gradcheck::{grad_check, GradReport};
pub use kernels::{kernel_by_name, registry, Kernel};
pub use optim::{adamw_step, AdamState, AdamW, AdamWConfig, Parameters};
pub use tensor::Tensor;
