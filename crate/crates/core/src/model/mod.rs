//! Toy bidirectional multimodal transformer with attention capture.

mod bias;
mod config;
mod kernels;
mod params;
mod rope;
pub(crate) mod scalar;
mod transformer;

pub use bias::{build_bias, BiasMatrix, BiasSpec, MASKED_LOGIT};
pub use config::ModelConfig;
pub use params::{LayerParams, Params, Tensor};
pub use rope::{rope2d, rope_angles};
pub use scalar::Scalar;
pub use transformer::{
    attention_layer, scaled_dot_attention, timestep_bucket, AttentionRecord, ForwardCache, ForwardOutput, Model,
    Stream, TokenStreams,
};
