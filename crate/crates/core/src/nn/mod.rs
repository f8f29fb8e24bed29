//! Minimal dense 3D network primitives with hand-written backward passes.
//!
//! Tensors hold one sample (`channels x W x H x L`, x fastest). Batches are
//! handled by the callers, which average per-sample gradients in a fixed
//! order so results do not depend on thread scheduling.

mod conv;
mod deconv;
mod groupnorm;
mod linear;
mod loss;
mod pool;
mod real;
mod tensor;

pub mod gradcheck;

pub use conv::{Conv1, Conv3};
pub use deconv::Deconv2;
pub use groupnorm::{GroupNorm, GroupNormCache};
pub use linear::{global_avg_pool, global_avg_pool_backward, Linear};
pub use loss::{downsample_labels, softmax, softmax_cross_entropy};
pub use pool::{MaxPool2, PoolIndices};
pub use real::{gemm, Real};
pub use tensor::{add_assign, relu_backward, relu_inplace, Tensor};
