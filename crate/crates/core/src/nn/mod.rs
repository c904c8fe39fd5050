//! Minimal neural-network toolkit on top of candle tensors.

mod layers;
mod store;

pub use layers::{
    abs_zero_subgradient, conv2d, conv_transpose2d, leaky_relu, log_softmax_last, max_pool2x2, scalar, sigmoid, sign, softmax_last,
    BatchNorm2d, Conv2d, ConvTranspose2d, DropoutNoise, Linear, NormMode,
};
pub use store::{architecture_hash, load_tensors, save_tensors, Init, ParamStore};
