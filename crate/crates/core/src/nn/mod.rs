//! Neural building blocks shared by both branches.

pub mod attention;
pub mod conv;
pub mod norm;
pub mod resample;

pub use attention::{lka_forward, se_forward, LkaLayer, SeLayer, SE_REDUCTION};
pub use conv::{conv2d, Conv2dLayer, ConvSpec, Init, Padding};
pub use norm::{layer_norm, LayerNorm};
pub use resample::{bicubic_upsample, bicubic_upsample_var, box_mean3, cubic_kernel, global_avg_pool};
