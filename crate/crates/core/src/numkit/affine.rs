use alloc::vec;
use alloc::vec::Vec;

use super::{ParamSet, Rng};
use crate::{Error, Result};

/// `y = weight * x + bias` with a row-major `out_dim x in_dim` weight.
/// `bias` is absent for pure linear maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    out_dim: usize,
    in_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl AffineParams {
    pub fn new(out_dim: usize, in_dim: usize, weight: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        if weight.len() != out_dim * in_dim {
            return Err(Error::Dimension {
                op: "affine weight",
                expected: out_dim * in_dim,
                got: weight.len(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != out_dim {
                return Err(Error::Dimension {
                    op: "affine bias",
                    expected: out_dim,
                    got: b.len(),
                });
            }
        }
        Ok(Self {
            out_dim,
            in_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(out_dim: usize, in_dim: usize, with_bias: bool) -> Self {
        Self {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: with_bias.then(|| vec![0.0; out_dim]),
        }
    }

    pub fn identity(dim: usize, with_bias: bool) -> Self {
        let mut p = Self::zeros(dim, dim, with_bias);
        for i in 0..dim {
            p.weight[i * dim + i] = 1.0;
        }
        p
    }

    /// Uniform in `[-1/sqrt(in_dim), 1/sqrt(in_dim)]` for weight and bias.
    pub fn init(out_dim: usize, in_dim: usize, with_bias: bool, rng: &mut Rng) -> Self {
        Self {
            out_dim,
            in_dim,
            weight: super::uniform_fan_in(rng, in_dim, out_dim * in_dim),
            bias: with_bias.then(|| super::uniform_fan_in(rng, in_dim, out_dim)),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::Dimension {
                op: "affine",
                expected: self.in_dim,
                got: x.len(),
            });
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut y = match &self.bias {
            Some(b) => b.clone(),
            None => vec![0.0; self.out_dim],
        };
        for (row, yi) in self.weight.chunks_exact(self.in_dim).zip(y.iter_mut()) {
            *yi += super::dot(row, x);
        }
        y
    }

    /// Accumulates weight/bias gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut AffineParams) -> Vec<f64> {
        debug_assert_eq!(dy.len(), self.out_dim);
        let mut dx = vec![0.0; self.in_dim];
        for (i, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.in_dim..(i + 1) * self.in_dim];
            let grow = &mut grads.weight[i * self.in_dim..(i + 1) * self.in_dim];
            for j in 0..self.in_dim {
                grow[j] += g * x[j];
                dx[j] += g * row[j];
            }
        }
        if let Some(gb) = &mut grads.bias {
            super::add_into(gb, dy);
        }
        dx
    }

    /// `weight^T * v`.
    pub fn transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim];
        for (row, &g) in self.weight.chunks_exact(self.in_dim).zip(v) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += g * w;
            }
        }
        out
    }
}

impl ParamSet for AffineParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = vec![&self.weight[..]];
        if let Some(b) = &self.bias {
            v.push(&b[..]);
        }
        v
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![&mut self.weight[..]];
        if let Some(b) = &mut self.bias {
            v.push(&mut b[..]);
        }
        v
    }
}

/// `weight * x + bias`.
pub fn affine(x: &[f64], p: &AffineParams) -> Result<Vec<f64>> {
    p.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{fd_grad, flatten, rel_error, seeded_rng, unflatten_into};

    #[test]
    fn identity_and_direct_arithmetic() {
        let p = AffineParams::identity(2, true);
        assert_eq!(affine(&[3.0, 4.0], &p).unwrap(), [3.0, 4.0]);
        let p = AffineParams::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], Some(vec![1.0, 1.0])).unwrap();
        assert_eq!(affine(&[1.0, 1.0], &p).unwrap(), [4.0, 8.0]);
    }

    #[test]
    fn extent_errors() {
        assert!(AffineParams::new(2, 2, vec![0.0; 3], None).is_err());
        assert!(AffineParams::new(2, 2, vec![0.0; 4], Some(vec![0.0])).is_err());
        let p = AffineParams::zeros(2, 3, true);
        assert!(matches!(
            affine(&[1.0, 2.0], &p),
            Err(Error::Dimension { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn seeded_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(0);
        let p = AffineParams::init(3, 4, true, &mut rng);
        let x = [0.5, -1.0, 0.25, 2.0];
        let c = [1.0, -0.5, 2.0];
        let loss = |p: &AffineParams, x: &[f64]| -> f64 {
            p.forward(x).unwrap().iter().zip(&c).map(|(y, c)| c * y * y).sum()
        };
        let y = p.forward(&x).unwrap();
        let dy: Vec<f64> = y.iter().zip(&c).map(|(y, c)| 2.0 * c * y).collect();
        let mut g = p.zeros_like();
        let dx = p.backward(&x, &dy, &mut g);

        let fd_x = fd_grad(|x| loss(&p, x), &x, 1e-3).unwrap();
        assert!(rel_error(&dx, &fd_x) < 1e-4);
        let theta = flatten(&p);
        let fd_p = fd_grad(
            |t| {
                let mut q = p.clone();
                unflatten_into(&mut q, t);
                loss(&q, &x)
            },
            &theta,
            1e-3,
        )
        .unwrap();
        assert!(rel_error(&flatten(&g), &fd_p) < 1e-4);
    }
}
