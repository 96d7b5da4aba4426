//! First-order optimizers over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::params::{GradSet, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer state for one parameter set.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.values().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let (m, v) = match config {
            OptimizerConfig::Sgd { .. } => (Vec::new(), Vec::new()),
            OptimizerConfig::Adam { .. } => (zeros(), zeros()),
        };
        Optimizer { config, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with the gradients in `grads`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradSet<T>) {
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                let lr = T::lit(lr);
                for (p, g) in params.values_mut().iter_mut().zip(grads.matrices()) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - lr * d;
                    }
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
                let step = T::lit(lr * c2.sqrt() / c1);
                let eps_hat = eps * T::lit(c2.sqrt());
                for ((p, g), (m, v)) in params
                    .values_mut()
                    .iter_mut()
                    .zip(grads.matrices())
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((w, &d), (mi, vi)) in it {
                        *mi = b1 * *mi + one_b1 * d;
                        *vi = b2 * *vi + one_b2 * d * d;
                        *w = *w - step * *mi / (vi.sqrt() + eps_hat);
                    }
                }
            }
        }
    }
}

/// Rescales `grads` so its global norm does not exceed `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut GradSet<T>, max_norm: T) -> T {
    let norm = grads.global_norm();
    if norm > max_norm && norm > T::zero() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Matrix::scalar(v));
        p
    }

    fn grad(g: f64) -> GradSet<f64> {
        GradSet::from_matrices(vec![Matrix::scalar(g)])
    }

    #[test]
    fn sgd_step() {
        let mut p = single(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 }, &p);
        opt.step(&mut p, &grad(2.0));
        assert!((p.values()[0].item() - 0.8).abs() < 1e-15);
    }

    /// The first bias-corrected update moves every coordinate by about `lr`
    /// against the gradient sign, regardless of gradient magnitude.
    #[test]
    fn adam_first_step_has_unit_magnitude() {
        for g in [1e-3, 5.0, -40.0] {
            let mut p = single(0.0);
            let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), &p);
            opt.step(&mut p, &grad(g));
            let expect = -0.01 * g.signum();
            assert!((p.values()[0].item() - expect).abs() < 1e-7, "{g}");
        }
    }

    /// Reference recurrence written out directly.
    #[test]
    fn adam_matches_textbook_recurrence() {
        let gs = [0.5, -1.0, 2.0, 0.25];
        let (lr, b1, b2, eps): (f64, f64, f64, f64) = (0.05, 0.9, 0.999, 1e-8);
        let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for (t, &g) in gs.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = single(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(lr), &p);
        for &g in &gs {
            opt.step(&mut p, &grad(g));
        }
        assert!((p.values()[0].item() - w).abs() < 1e-12);
        assert_eq!(opt.steps_taken(), 4);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = GradSet::from_matrices(vec![Matrix::row_vector(vec![3.0f64, 4.0])]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        let mut h = GradSet::from_matrices(vec![Matrix::row_vector(vec![0.3f64, 0.4])]);
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h.matrices()[0].data(), &[0.3, 0.4]);
    }
}
