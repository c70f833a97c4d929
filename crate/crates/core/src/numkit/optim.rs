use alloc::vec;
use alloc::vec::Vec;

use super::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// Step decay: `initial * gamma^(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub gamma: f64,
    pub every: usize,
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        let steps = if self.every == 0 { 0 } else { epoch / self.every };
        self.initial * libm::pow(self.gamma, steps as f64)
    }
}

/// Optimizer state over a flattened parameter set.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        let moments = matches!(kind, OptimizerKind::Adam { .. });
        Self {
            kind,
            m: if moments { vec![0.0; num_params] } else { Vec::new() },
            v: if moments { vec![0.0; num_params] } else { Vec::new() },
            t: 0,
        }
    }

    /// Applies one update. Buffers are skipped where `mask` (per buffer,
    /// in `slices()` order) is false.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64, mask: Option<&[bool]>) {
        self.t += 1;
        let mut offset = 0;
        let grads = grads.slices();
        for (b, (p, g)) in params.slices_mut().into_iter().zip(grads).enumerate() {
            let n = p.len();
            let active = mask.is_none_or(|m| m[b]);
            if active {
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (pi, gi) in p.iter_mut().zip(g) {
                            *pi -= lr * gi;
                        }
                    }
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
                        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
                        let m = &mut self.m[offset..offset + n];
                        let v = &mut self.v[offset..offset + n];
                        for i in 0..n {
                            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                            p[i] -= lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + eps);
                        }
                    }
                }
            }
            offset += n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::AffineParams;

    #[test]
    fn step_decay() {
        let s = LrSchedule {
            initial: 1e-4,
            gamma: 0.9,
            every: 20,
        };
        assert_eq!(s.at_epoch(0), 1e-4);
        assert_eq!(s.at_epoch(19), 1e-4);
        assert!((s.at_epoch(20) - 0.9e-4).abs() < 1e-18);
        assert!((s.at_epoch(45) - 0.81e-4).abs() < 1e-18);
    }

    #[test]
    fn both_optimizers_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::ADAM] {
            let mut p = AffineParams::identity(2, true);
            let mut opt = Optimizer::new(kind, p.num_params());
            for _ in 0..200 {
                let mut g = p.zeros_like();
                for (gs, ps) in g.slices_mut().into_iter().zip(p.slices()) {
                    for (gi, pi) in gs.iter_mut().zip(ps) {
                        *gi = 2.0 * (pi - 0.5);
                    }
                }
                opt.step(&mut p, &g, 0.05, None);
            }
            assert!(p.weight.iter().all(|w| (w - 0.5).abs() < 0.05), "{kind:?}");
        }
    }
}
