//! Dense tensors, reverse-mode autodiff, optimizers and gradient checking.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use graph::{log_softmax_raw, sigmoid, softmax_raw, Bound, Graph, Var};
pub use optim::{adam_step, sgd_step, AdamConfig, OptimizerKind, OptimizerState};
pub use params::{ParamSet, PARAMS_FORMAT, PARAMS_VERSION};
pub use tensor::Tensor;

pub(crate) use graph::dot_raw;
