//! Minimal CPU neural-network kernel: NCHW batches, convolution layers,
//! normalization, activations, and explicit backward passes.

pub mod conv;
pub mod norm;
pub mod stack;

pub use conv::{conv_out_len, Conv2d, ConvTranspose2d};
pub use norm::{Norm2d, NormCache, NormKind};
pub use stack::{gaussian_conv, gaussian_conv_t, norm_layer, Layer, LayerCache, Stack, StackCache};

/// `(batch, channels, height, width)` tensor.
pub type Batch<F> = ndarray::Array4<F>;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("input spatial size {h}x{w} must have both sides divisible by {div} (two stride-2 downsamplings)")]
    NotDivisible { h: usize, w: usize, div: usize },
    #[error("input {h}x{w} too small for a {k}x{k} convolution with padding {pad}")]
    TooSmall {
        h: usize,
        w: usize,
        k: usize,
        pad: usize,
    },
    #[error("channel mismatch: input has {got} channels, layer expects {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("reflection padding {pad} requires spatial size greater than {pad}, got {h}x{w}")]
    ReflectTooSmall { pad: usize, h: usize, w: usize },
}
