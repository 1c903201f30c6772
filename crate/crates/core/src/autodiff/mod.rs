//! Reverse-mode automatic differentiation over real `f64` tensors.
//!
//! Complex quantities are carried as (real, imaginary) pairs of tensors by callers.

mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{BatchNormMode, BatchNormParams, Gradients, Graph, OpKind, StePolicy, Var};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::Tensor;
