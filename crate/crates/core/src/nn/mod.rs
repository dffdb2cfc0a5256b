//! Layers, parameters, and the cached forward / exact reverse passes for
//! residual networks.

mod batchnorm;
pub mod checkpoint;
mod loss;
mod network;
mod params;
mod presets;
mod spec;

pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, updated_running_stats, BatchNormCache, BN_EPSILON,
    BN_MOMENTUM,
};
pub use loss::{correct_predictions, softmax_cross_entropy};
pub use network::{
    with_corrupted_backward, BlockCache, BlockGradients, ForwardCache, Gradients, Mode,
};
pub(crate) use network::{block_backward, forward_branch, forward_skip};
pub use params::{GradMap, ParamStore, Parameter};
pub use presets::{resmlp, resnet8, Preset};
pub use spec::{Init, Layer, LayerKind, NetworkSpec, ParamSpec, ResidualBlock, Skip};
