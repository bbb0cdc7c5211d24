//! Reverse-mode differentiation engine and neural building blocks.
//!
//! A [`Graph`] records tensor operations eagerly; [`Graph::backward`] walks the
//! recorded nodes in reverse creation order. Trainable weights live in a
//! [`ParamStore`] and enter a graph through [`Graph::param`].

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod layers;
pub mod loss;
pub mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
