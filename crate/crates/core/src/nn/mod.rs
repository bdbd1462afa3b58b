//! Neural building blocks assembled on the autodiff graph.

mod blocks;
mod params;

pub use blocks::{
    fusion_invocations, AttentionPool, BlockConfig, CrossAttentionBlock, CrossAttentionStack,
    GatedFusion, LayerNorm, Linear, Resampler, LN_EPS,
};
pub use params::{Bound, Init, ParamId, ParamSet};
