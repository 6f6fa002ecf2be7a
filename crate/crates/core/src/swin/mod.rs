//! Hierarchical Swin Transformer classifier: patch embedding, alternating
//! regular/shifted window attention blocks, patch merging between stages,
//! pooled features and a linear two-class head.

mod config;
mod layers;
mod model;

pub use config::{StageGeometry, SwinConfig};
pub use layers::{
    patch_embed, patch_merging, relative_position_index, shifted_window_mask, swin_block, window_attention,
    window_partition, window_reverse, AttentionWeights, BlockWeights, MergeWeights, PatchEmbedWeights, MASK_VALUE,
};
pub use model::{forward_sample, stage_blocks, BoundParams, SwinModel, INIT_STD};
