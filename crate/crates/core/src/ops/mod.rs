//! Neural primitives the adapter is assembled from.
//!
//! Each operation is a pure function on [`Tensor`](crate::tensor::Tensor)s
//! paired with an adjoint kernel; [`crate::autograd::Tape`] records them for
//! reverse mode.

pub mod activation;
pub mod conv;
pub mod head;
pub mod norm;
pub mod spatial;

pub use activation::{gelu, normal_cdf, sigmoid};
pub use conv::{conv1x1_grouped, conv2d, conv_depthwise, Conv1x1Grouped, ConvDepthwise};
pub use head::{cross_entropy, linear, softmax};
pub use norm::{layernorm_channels, LayerNormChannels, LAYERNORM_EPS};
pub use spatial::{
    broadcast_add, broadcast_mul, channel_affine, channel_shuffle, global_avg_pool, grid_to_tokens, sigmoid_gate,
    tokens_to_grid, Gate,
};
