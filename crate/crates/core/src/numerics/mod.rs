//! Dense f64 tensors, define-by-run reverse-mode autodiff, and Adam.

pub mod adam;
pub mod fd;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use adam::{clip_global_norm, AdamState};
pub use fd::{finite_difference_gradient, gradient_rel_err};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
