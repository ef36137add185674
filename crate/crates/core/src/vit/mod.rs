//! Configurable tiny Vision Transformer: patch embedding, class token,
//! learned positional embeddings, pre-norm attention/MLP blocks and a
//! classification head.

mod config;
mod model;
mod params;
mod patch;
mod train;

pub use config::ViTConfig;
pub use model::{
    attention, attention_forward, forward, predict, probabilities, record_forward, AttentionRecord, ParamGrad,
    Recording,
};
pub use params::{block_param, head_factor, ModelParams, HEAD_BIAS, HEAD_WEIGHT};
pub use patch::{patch_gather_index, patch_pixels, patchify, unpatchify};
pub use train::{loss_and_param_grads, train_clean, TrainConfig};
