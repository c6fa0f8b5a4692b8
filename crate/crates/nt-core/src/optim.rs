//! Adam optimizer and the cosine learning-rate schedule.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cosine decay from `base` at step 0 to 0 at `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / (total as f64);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with per-slot moment buffers. The caller registers a fixed number of
/// parameter slots up front and must pass parameters and gradients in that
/// same order on every step; moments are kept in f64 so f32 runs do not lose
/// the small-update tail.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(n_slots: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![Vec::new(); n_slots],
            v: vec![Vec::new(); n_slots],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` of `None` leaves slot i untouched (a
    /// parameter that did not participate in this step's loss).
    pub fn step<F: Scalar>(&mut self, params: &mut [&mut Tensor<F>], grads: &[Option<Tensor<F>>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "slot count fixed at construction");
        assert_eq!(grads.len(), self.m.len(), "slot count fixed at construction");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, param) in params.iter_mut().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            let n = param.numel();
            assert_eq!(grad.numel(), n, "gradient shape drift in slot {i}");
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; n];
                self.v[i] = vec![0.0; n];
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (e, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad.data()[e].as_f64();
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * g;
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * g * g;
                let mhat = m[e] / bc1;
                let vhat = v[e] / bc2;
                let upd = lr * mhat / (vhat.sqrt() + self.eps);
                *p = F::from_f64(p.as_f64() - upd);
            }
        }
    }
}
