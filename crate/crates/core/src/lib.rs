// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy transformer laboratory for circuit analysis under fine-tuning.
//!
//! Trains small decoder-only transformers on synthetic indirect-object and
//! greater-than tasks, then measures how their circuits change under clean,
//! poisoned and reversing fine-tuning.

pub mod analysis;
pub mod circuit;
pub mod data;
pub mod error;
pub mod model;
pub mod patch;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
pub use milab_tensor::Tensor;
