//! Layers, the encoder-decoder trunk and the task heads.

pub mod functional;
mod layers;
mod model;
mod params;

pub use functional::{
    adaptive_avg_pool, bilinear_upsample, conv2d, global_avg_pool, group_norm, l2_normalize_rows, linear,
    to_rows,
};
pub use layers::{ConvBlock, ConvLayer, GroupNormLayer, LinearLayer};
pub use model::{task_channels, ArchConfig, AuxHead, DenseClHead, MocoHead, Model, RotHead, Trunk};
pub use params::{init_tensor, Bind, Init, ParamStore};
