//! Dense `f32` tensors and a tape-based reverse-mode autodiff engine.

mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod ops;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, finite_difference_check_many, relative_error};
pub use graph::{group_norms, Gradients, Graph, GroupAxis, Var};
pub use ops::{Activation, Elementwise, Padding};
pub use tensor::{Element, Tensor, TensorOf};
