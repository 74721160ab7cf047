//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable row-major array of `f32` or `f64`. Operations
//! that should be differentiated are applied to [`Var`] handles recorded on a
//! [`Graph`]; [`Graph::backward`] then produces leaf gradients.

mod backward;
pub mod error;
pub mod gradcheck;
mod graph;
pub mod io;
mod kernels;
mod ops;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use kernels::ConvGeometry;
pub use real::{DType, Real};
pub use tensor::{numel, strides_of, Tensor};
