use alloc::vec::Vec;

use crate::{Error, Result};

/// Pointwise activation used between convolution and affine layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ActKind {
    /// `max(0, x)`.
    Relu,
    /// Smooth rectifier `x * sigmoid(x)`; differentiable everywhere.
    #[default]
    Silu,
}

impl ActKind {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActKind::Relu => x.max(0.0),
            ActKind::Silu => x * sigmoid_scalar(x),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActKind::Silu => {
                let s = sigmoid_scalar(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    pub fn apply_slice(self, pre: &[f64]) -> Vec<f64> {
        pre.iter().map(|&x| self.apply(x)).collect()
    }

    /// `dpre[i] = dout[i] * f'(pre[i])`, in place on `dout`.
    pub fn backward_in_place(self, pre: &[f64], dout: &mut [f64]) {
        for (d, &x) in dout.iter_mut().zip(pre) {
            *d *= self.derivative(x);
        }
    }
}

#[cfg(feature = "std")]
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    x.exp()
}

#[cfg(not(feature = "std"))]
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| sigmoid_scalar(x)).collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Dimension {
            op: "softmax",
            expected: 1,
            got: 0,
        });
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out: Vec<f64> = v.iter().map(|&x| exp(x - max)).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Gradient wrt the logits given the softmax output `p` and `dp`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(a, b)| a * (b - inner)).collect()
}
