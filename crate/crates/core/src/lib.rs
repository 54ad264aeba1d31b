//! Dual-encoder road segmentation: a ConvNeXt-style CNN branch and a spatial-frequency
//! transformer branch fused per stage, with a reverse-mode autodiff graph, losses, metrics,
//! synthetic data and the pure parts of training.
//!
//! The crate is `no_std` + `alloc`. The default `std` feature only enables runtime CPU
//! feature detection in the matrix-multiplication backend.

#![no_std]
// Negated comparisons are how validation rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod frequency;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod objectives;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use nn::{DualEncoderNet, ModelConfig, SegmentationModel, Tap};
pub use objectives::{ConfusionCounts, Metrics, MetricsReport};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
