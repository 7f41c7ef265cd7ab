//! Minimal reverse-mode autodiff engine used by the whole model.

pub mod image_ops;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tensor;

pub use image_ops::{bilinear_sample, conv2d, flatten_tokens, resize_bilinear, unflatten_tokens, upsample_nearest2, upsample_to};
pub use nn::{Conv2dLayer, Embedding, LayerNorm, Linear, Mha, MhaOutput, Mlp};
pub use optim::Adam;
pub use param::{Param, ParamStore};
pub use tensor::{Elem, Gradients, Tensor};
