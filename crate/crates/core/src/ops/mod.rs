//! Layer kernels: forward and backward passes for every layer the network uses.

mod activation;
mod conv;
mod gemm;
mod loss;
mod pool;
mod resize;
mod sgd;

pub use activation::{relu, relu_backward};
pub use conv::{conv2d_backward, conv2d_backward_params, conv2d_forward, Conv2d, ConvGrads};
pub use loss::{softmax, softmax_cross_entropy};
pub use pool::{gap, gap_backward, maxpool2, maxpool2_backward, PoolIndices};
pub use resize::bilinear_resize;
pub use sgd::{sgd_update, SgdConfig};
