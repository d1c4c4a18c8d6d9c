//! Adaptive-moment optimizer over flat `f32` parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update `params -= lr · m̂ / (√v̂ + eps)`.
    ///
    /// Entries where `mask` is `false` are left untouched and keep zero
    /// moments.
    pub fn step(&mut self, params: &mut [f32], grad: &[f32], mask: Option<&[bool]>) {
        assert_eq!(params.len(), self.m.len(), "optimizer sized for a different vector");
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grad[i] as f64;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] = (params[i] as f64 - self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
        }
    }
}

/// `params -= lr · grad` on the masked entries.
pub fn sgd_step(params: &mut [f32], grad: &[f32], lr: f64, mask: Option<&[bool]>) {
    for (i, (p, &g)) in params.iter_mut().zip(grad).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            *p = (*p as f64 - lr * g as f64) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_in_sign_direction() {
        let mut opt = Adam::new(3, 0.1);
        let mut p = vec![1.0f32, 1.0, 1.0];
        opt.step(&mut p, &[2.0, -0.5, 0.0], None);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn masked_entries_are_frozen() {
        let mut opt = Adam::new(2, 0.1);
        let mut p = vec![1.0f32, 1.0];
        opt.step(&mut p, &[1.0, 1.0], Some(&[true, false]));
        assert_eq!(p[1], 1.0);
        let mut q = vec![0.0f32, 0.0];
        sgd_step(&mut q, &[1.0, 1.0], 0.5, Some(&[false, true]));
        assert_eq!(q, vec![0.0, -0.5]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(2, 0.05);
        let mut p = vec![3.0f32, -2.0];
        for _ in 0..2000 {
            let g = vec![p[0], 4.0 * p[1]];
            opt.step(&mut p, &g, None);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }
}
