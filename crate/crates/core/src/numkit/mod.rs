//! Dense numeric layer: tensors, affine and convolution primitives with
//! hand-derived backward passes, activations, softmax, optimizers and the
//! finite-difference gradient oracle.

mod act;
mod affine;
mod conv;
mod gemm;
mod gradcheck;
mod init;
mod optim;
mod params;
mod tensor;

pub(crate) use act::exp;
pub use act::{sigmoid, sigmoid_scalar, softmax, softmax_backward, ActKind};
pub use affine::{affine, AffineParams};
pub use conv::{conv3x3, conv3x3_naive, ConvCache, ConvParams};
pub use gemm::gemm;
pub use gradcheck::{fd_grad, rel_error};
pub use init::{seeded_rng, uniform_fan_in, Rng};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use params::{flatten, unflatten_into, ParamSet};
pub use tensor::Tensor;

/// Error unless every value is finite.
pub fn ensure_finite(values: &[f64], context: &'static str) -> crate::Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::NonFinite(context))
    }
}

/// `dst += src`, element-wise.
pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
