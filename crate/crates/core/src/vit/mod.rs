//! The Vision Transformer: patch embedding, pre-norm encoder stack and a
//! classification head reading the class token.

mod config;
mod model;
mod params;

pub use config::ViTConfig;
pub use model::{
    batch_patches, embed, encoder_block, forward, forward_batched, forward_graph, forward_image,
    multi_head_attention, patchify, unpatchify, AttentionTrace, Dropout, ForwardOutput,
    ForwardVars, LayerVars, ParamVars, LN_EPS,
};
pub use params::{
    count_params, inventory, is_head, layer_key, InitKind, ModelParams, ParamSpec, HEAD_BIAS,
    HEAD_WEIGHT,
};
