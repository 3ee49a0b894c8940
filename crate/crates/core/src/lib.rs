//! Label completion for partially annotated semantic segmentation labels.
//!
//! A label and its image are fused into a class-layered map, split into
//! patches, partially masked, encoded by a transformer that only sees the
//! visible patches, and decoded over the full grid after the dropped
//! positions are refilled with embeddings of the corresponding image patches.
//! The decoder predicts per-pixel class logits, which are spliced back into
//! the unknown regions of the input label.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod ips;
pub mod loss;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod training;

pub use data::{FuseMap, FusionMode, GridSpec, ModelConfig, NormPlacement, RgbImage, Sample, SegLabel, TokenSequence, UNKNOWN};
pub use error::{Error, Result};
pub use masking::{MaskPlan, MaskStrategy, PixelMask};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use model::ModelParams;
