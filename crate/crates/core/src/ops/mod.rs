//! Forward and backward kernels over plain [`Tensor`](crate::Tensor) values.
//!
//! Everything here is a pure function: inputs are borrowed immutably and a
//! fresh tensor is returned. The graph in [`crate::autograd`] wires these
//! kernels into reverse-mode differentiation.

mod conv;
mod gemm;
mod matmul;
mod norm;
mod softmax;
mod upsample;

pub use conv::{conv2d, conv2d_backward, Conv2dGrads, Conv2dSpec};
pub(crate) use gemm::gemm;
pub use matmul::{matmul, matmul_backward};
pub use norm::{batch_norm, batch_norm_backward, BatchStats, BnMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use softmax::{softmax_axis, softmax_backward};
pub use upsample::{bilinear_upsample_x2, bilinear_upsample_x2_backward};

use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
