//! Adam/AdamW with optional decoupled weight decay, one state per tensor.

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; only applied for [`OptimizerKind::AdamW`].
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second-moment state for one parameter tensor.
pub struct AdamState<D: Dimension> {
    m: Array<f64, D>,
    v: Array<f64, D>,
    t: u64,
}

impl<D: Dimension> AdamState<D> {
    pub fn new(shape: D) -> Self {
        AdamState {
            m: Array::zeros(shape.clone()),
            v: Array::zeros(shape),
            t: 0,
        }
    }

    pub fn step(&mut self, param: &mut Array<f64, D>, grad: &Array<f64, D>, cfg: &OptimizerConfig) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch");
        self.t += 1;
        let bias1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bias2 = 1.0 - cfg.beta2.powi(self.t as i32);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                let mut update = m_hat / (v_hat.sqrt() + cfg.eps);
                if cfg.kind == OptimizerKind::AdamW && cfg.weight_decay > 0.0 {
                    update += cfg.weight_decay * *p;
                }
                *p -= cfg.lr * update;
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn minimizes_a_quadratic() {
        // f(x) = (x - 3)^2, gradient 2(x - 3).
        let mut x: Array1<f64> = array![0.0];
        let mut state = AdamState::new(x.raw_dim());
        let cfg = OptimizerConfig::adam(0.1);
        for _ in 0..500 {
            let grad = array![2.0 * (x[0] - 3.0)];
            state.step(&mut x, &grad, &cfg);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "converged to {}", x[0]);
    }

    #[test]
    fn adamw_decays_weights_with_zero_gradient() {
        let mut x: Array1<f64> = array![1.0];
        let mut state = AdamState::new(x.raw_dim());
        let cfg = OptimizerConfig::adamw(0.01);
        let zero = array![0.0];
        for _ in 0..10 {
            state.step(&mut x, &zero, &cfg);
        }
        assert!(x[0] < 1.0);
        // Plain Adam leaves the weight untouched under zero gradient.
        let mut y: Array1<f64> = array![1.0];
        let mut state = AdamState::new(y.raw_dim());
        let cfg = OptimizerConfig::adam(0.01);
        for _ in 0..10 {
            state.step(&mut y, &zero, &cfg);
        }
        assert_eq!(y[0], 1.0);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut x: Array1<f64> = array![1.0, -2.0];
        let mut state = AdamState::new(x.raw_dim());
        let cfg = OptimizerConfig {
            lr: 0.0,
            ..OptimizerConfig::adamw(0.0)
        };
        state.step(&mut x, &array![0.5, -0.25], &cfg);
        assert_eq!(x, array![1.0, -2.0]);
    }
}
