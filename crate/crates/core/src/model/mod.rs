//! Asymmetric transformer: encoder over visible fuse-map patches, decoder over the full grid.

pub mod attention;
pub mod block;
pub mod checkpoint;
pub mod layers;
mod network;

pub use attention::{multi_head_attention, AttentionParams};
pub use block::{lmmsa_block, BlockParams};
pub use layers::{FeedForward, LayerNorm, Linear, Params};
pub use network::{argmax_labels, decode_and_predict, encode, init_params, Model, ModelParams, SampleInput};
