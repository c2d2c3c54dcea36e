//! Differentiable numeric primitives: tensors, kernels with hand-written
//! vector-Jacobian products, a reverse-mode tape, Adam, and a
//! finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use ops::{Activation, NormMode, RunningStats};
pub use tensor::{Real, Tensor};
