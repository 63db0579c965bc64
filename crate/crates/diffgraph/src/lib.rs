//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Graphs are built per forward pass ([`Graph`]) and swept once by
//! [`Graph::backward`]. Parameters live in a [`ParameterSet`]; binding a set
//! onto a graph turns trainable entries into gradient-carrying leaves and
//! frozen entries into constants, so frozen weights never receive gradients.

mod check;
mod error;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use check::{finite_difference_check, numeric_gradient, relative_error, FdReport};
pub use error::{GraphError, Result};
pub use graph::{pairwise_sq_dists, Gradients, Graph, Var};
pub use params::{flatten_grads, Bound, ParamGrads, Parameter, ParameterSet, MAGIC};
pub use tensor::Tensor;
