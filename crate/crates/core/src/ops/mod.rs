//! Differentiable primitives: each operation has a forward pass and a
//! hand-derived backward pass, verified by finite differences in the tests.

mod act;
mod conv;
mod linear;
mod norm;
mod pool;
mod sample;
mod sgd;

pub use act::{sigmoid, silu_backward, silu_forward, softmax_backward_slice, softmax_slice};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm, BatchNormCache, LayerNorm, LayerNormCache};
pub use pool::{max_pool_backward, max_pool_forward, MaxPoolCache};
pub use sample::{bilinear_sample, bilinear_sample_backward, sample_point, scatter_point_grad};
pub use sgd::sgd_step;
