// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal dense tensors and reverse-mode automatic differentiation.
//!
//! Everything is `f64` and single-threaded. Reductions run in a fixed order,
//! so evaluating the same graph on the same bindings is bit-reproducible.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{GradMap, Graph, Var};
pub use tensor::Tensor;
