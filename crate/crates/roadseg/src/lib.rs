//! File-backed companion of `roadseg-core`: image datasets, TOML configuration, checkpoints,
//! run manifests, the training driver and the `roadseg` command line.

// Negated comparisons are how validation rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod trainer;

pub use error::{AppError, AppResult};
