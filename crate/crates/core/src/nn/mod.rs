//! Student/teacher networks: reference encoder, classifier, projection and
//! prediction heads, class-specific attention modules and the EMA update.

mod conv;
mod fused;
mod layers;
mod model;
mod optim;
mod params;

pub use conv::conv2d_cbhw;
pub use layers::{leaky_relu, sigmoid, softmax_rows, BatchNorm, Conv2d, Linear, Mode};
pub use model::{
    AttentionModule, AttentionModuleSet, AttentionRole, ClassDistMap, FeatureMap, ImageBatch, MlpHead, Network,
    NetworkConfig, Segmenter, OUTPUT_STRIDE,
};
pub use optim::Sgd;
pub use params::{ema_blend_f32, ema_blend_f64, ema_update, ParamEntry, ParamKind, ParamStore};
