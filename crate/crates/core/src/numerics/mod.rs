//! Minimal differentiable numeric core: tensors, a reverse-mode tape,
//! transformer layers, AdamW and a finite-difference checker.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{AttnSpec, Gradients, Graph, Var};
pub use optim::{adamw_step, lr_at_step, AdamW, AdamWConfig, OptimizerState, StepStats};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
