//! Bias-corrected Adam updates, one state per parameter tensor.

use crate::tensor::Tensor;
use crate::TensorError;

/// Adam hyperparameters. Defaults: β1 = 0.9, β2 = 0.999, ε = 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter optimizer state: first/second moment estimates and a
/// step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(numel: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
            config,
        }
    }

    /// One bias-corrected update of `param` in place.
    pub fn step(&mut self, param: &mut Tensor, grad: &[f64]) -> Result<(), TensorError> {
        if grad.len() != param.numel() || self.m.len() != param.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape.clone(),
                rhs: vec![1, grad.len()],
            });
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..grad.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            param.data[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let before = p.data.clone();
        let mut st = AdamState::new(3, AdamConfig::new(0.1));
        st.step(&mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.data, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        // at t=1 bias correction cancels: delta = -lr * g / (|g| + eps)
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let mut st = AdamState::new(2, AdamConfig::new(0.05));
        st.step(&mut p, &[3.0, -0.25]).unwrap();
        assert!((p.data[0] - (-0.05)).abs() < 1e-6);
        assert!((p.data[1] - 0.05).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut st = AdamState::new(2, AdamConfig::new(0.1));
        let err = st.step(&mut p, &[1.0]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn quadratic_converges_and_matches_scalar_recurrence() {
        // Oracle: run the same recurrence with plain scalars.
        let cfg = AdamConfig::new(0.1);
        let (mut x_ref, mut m, mut v) = (1.0_f64, 0.0_f64, 0.0_f64);
        let mut trace = Vec::new();
        for t in 1..=100u64 {
            let g = 2.0 * x_ref;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
            let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
            x_ref -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            trace.push(x_ref);
        }
        assert!(x_ref.abs() < 0.1, "oracle did not converge: {x_ref}");

        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(1, cfg);
        for step in 0..100 {
            let g = 2.0 * p.data[0];
            st.step(&mut p, &[g]).unwrap();
            assert!((p.data[0] - trace[step]).abs() < 1e-12);
        }
        assert!(p.data[0].abs() < 0.1);
    }

    #[test]
    fn step_is_deterministic() {
        let cfg = AdamConfig::new(0.01);
        let run = || {
            let mut p = Tensor::vector(vec![0.3, -0.8]);
            let mut st = AdamState::new(2, cfg);
            for _ in 0..10 {
                let g: Vec<f64> = p.data.iter().map(|x| x.sin()).collect();
                st.step(&mut p, &g).unwrap();
            }
            (p, st)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        assert_eq!(p1.data, p2.data);
        assert_eq!(s1, s2);
    }
}
