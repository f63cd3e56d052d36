//! Minimal CPU tensor kernels for convolutional segmentation networks.
//!
//! Every layer keeps the activations it needs during a training forward pass
//! and exposes an explicit `backward`. Layouts are channel-first:
//! `(N, C, H, W)` for 2D and `(N, C, T, H, W)` for the temporally stacked 3D
//! path. All randomness flows through caller-supplied seeded generators, so
//! a fixed seed reproduces results bit for bit on one machine.

mod archive;
mod conv;
mod conv3d;
mod deconv;
mod dense;
mod error;
mod gemm;
mod im2col;
mod ops;
mod optim;
mod param;
mod pool;
mod tensor;

pub use archive::{load_archive, save_archive, Archive, NamedArray};
pub use conv::Conv2d;
pub use conv3d::{inflate_kernel, Conv3d};
pub use deconv::ConvTranspose2d;
pub use dense::Dense;
pub use error::NnError;
pub use ops::{
    concat_channels, mean_over_time, mean_over_time_backward, relu_backward_inplace,
    relu_inplace, softmax_channels, softmax_channels_backward, split_channels, stack_time,
    Activation, Dropout,
};
pub use optim::{Adam, AdamConfig};
pub use param::{HasParams, Param};
pub use pool::MaxPool2;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, NnError>;
