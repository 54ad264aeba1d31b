//! Network modules built on the graph: both encoder branches, fusion, decoder and accounting.

pub mod accounting;
pub mod activations;
pub mod cnn;
pub mod fusion;
pub mod layers;
pub mod network;
pub mod sft;

pub use accounting::{count_params, estimate_flops, FlopReport};
pub use activations::{export_activations, heatmap_from_features, Heatmap};
pub use network::{DualEncoderNet, ModelConfig, SegmentationModel, SegmentationOutput, SingleConvBaseline, Tap};
