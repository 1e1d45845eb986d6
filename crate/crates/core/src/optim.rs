//! SGD with momentum and weight decay.

use alloc::vec;
use alloc::vec::Vec;

/// Hyperparameters of the SGD update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// One velocity buffer per parameter buffer, in parameter order.
#[derive(Clone, Debug)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(param_sizes: &[usize]) -> Self {
        SgdState {
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn velocity_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.velocity[index]
    }

    pub fn len(&self) -> usize {
        self.velocity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocity.is_empty()
    }
}

/// In-place update of one parameter buffer:
/// `v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], lr: f64, cfg: &SgdConfig, velocity: &mut [f64]) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), velocity.len());
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + (g + cfg.weight_decay * *p);
        *p -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_descent() {
        let mut p = [1.0, 2.0];
        let g = [0.5, -0.25];
        let mut v = [0.0, 0.0];
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &g, 1.0, &cfg, &mut v);
        assert_eq!(p, [0.5, 2.25]);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = [1.0, -3.0];
        let g = [10.0, 10.0];
        let mut v = [0.0, 0.0];
        sgd_step(&mut p, &g, 0.0, &SgdConfig::default(), &mut v);
        assert_eq!(p, [1.0, -3.0]);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        // constant grad g, momentum 0.9, wd 0, lr 1:
        // step 1 decreases by g, step 2 by 1.9g; total 2.9g.
        let g = 0.4;
        let mut p = [1.0];
        let mut v = [0.0];
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &[g], 1.0, &cfg, &mut v);
        assert!((p[0] - (1.0 - g)).abs() < 1e-15);
        sgd_step(&mut p, &[g], 1.0, &cfg, &mut v);
        assert!((p[0] - (1.0 - g - 1.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = [2.0];
        let mut v = [0.0];
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.1,
        };
        sgd_step(&mut p, &[0.0], 1.0, &cfg, &mut v);
        assert!((p[0] - 1.8).abs() < 1e-15);
    }
}
