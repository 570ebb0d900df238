//! Deterministic neural kernels: dense layers, softmax, sinusoidal
//! embedding, attention, the strided depth-map encoder, and the weight
//! container. Every op is a pure function of its inputs and the store.

pub mod attention;
pub mod matrix;
pub mod ops;
pub mod rng;
pub mod weights;

pub use attention::{attention_specs, cross_attention, ia_self_attention, self_attention};
pub use matrix::FeatureMatrix;
pub use ops::{
    conv2d_encoder, conv_transpose1d, linear, mlp, sigmoid, sinusoidal_embed, sinusoidal_rows, softmax_rows, ImageStack,
};
pub use rng::Rng;
pub use weights::{Init, Tensor, TensorSpec, WeightStore};
