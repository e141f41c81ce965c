//! Numeric primitives: convolution, modulated deformable convolution with a
//! loop-level reference, bilinear sampling, attention gates and pooling.

pub mod attention;
pub mod conv;
pub mod deform;
pub mod geometry;
pub mod pool;
pub mod reference;
pub mod sampling;

pub use attention::{
    channel_attention, channel_gate, sigmoid, spatial_attention, spatial_gate, ChannelAttentionParams,
};
pub use conv::{conv2d, conv2d_backward, ConvGrads};
pub use deform::{deform_conv2d, deform_conv2d_backward, DeformGrads, DeformNeeds};
pub use geometry::{ConvOpts, ConvSpec, OffsetField};
pub use pool::global_avg_pool;
pub use reference::deform_conv2d_reference;
pub use sampling::bilinear_sample;

#[cfg(test)]
mod tests;
