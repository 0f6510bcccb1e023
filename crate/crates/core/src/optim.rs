//! Adam with bias correction.

use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    /// First moment (mean of gradients).
    pub m: Vec<T>,
    /// Second moment (mean of squared gradients).
    pub v: Vec<T>,
}

impl<T: Float> Adam<T> {
    pub fn new(n_params: usize, lr: T) -> Self {
        Self {
            lr,
            beta1: T::from(0.9).unwrap(),
            beta2: T::from(0.999).unwrap(),
            eps: T::from(1e-8).unwrap(),
            step: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
        }
    }

    /// One bias-corrected update. Panics on length mismatch; see [`Adam::try_step`].
    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        self.try_step(params, grads).expect("adam shapes")
    }

    pub fn try_step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state {} / params {} / grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let one = T::one();
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new(3, 1e-3f32);
        let mut p = [1.0f32, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]);
        assert_eq!(p, [1.0, -2.0, 0.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        // With a constant gradient the bias-corrected moments are exactly g and
        // g^2, so every step has magnitude lr * |g| / (|g| + eps).
        let lr = 1e-3;
        let g = 0.37;
        let mut adam = Adam::new(1, lr);
        let mut p = [0.0f64];
        for k in 1..=200 {
            let before = p[0];
            adam.step(&mut p, &[g]);
            let delta = before - p[0];
            let expected = lr * g / (g + 1e-8);
            assert!((delta - expected).abs() < 1e-12, "step {k}: {delta}");
        }
        // Scalar recurrence oracle for the moments.
        let (mut m, mut v) = (0.0, 0.0);
        for _ in 0..200 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
        }
        assert!((adam.m[0] - m).abs() < 1e-15);
        assert!((adam.v[0] - v).abs() < 1e-15);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut adam = Adam::new(2, 1e-2f32);
            let mut p = [0.3f32, -0.1];
            for i in 0..50 {
                let g = [p[0] * 2.0 + i as f32 * 0.01, (p[1] - 1.0).sin()];
                adam.step(&mut p, &g);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = Adam::new(2, 1e-3f32);
        let mut p = [0.0f32; 3];
        assert!(matches!(adam.try_step(&mut p, &[0.0; 3]), Err(Error::ShapeMismatch(_))));
    }
}
