//! Adam with a fixed learning rate and decoupled L2 decay.

use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPSILON: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// One moment slot per parameter tensor, sized by `sizes`.
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Starts a new step; call once before the per-slot updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one tensor. A missing gradient counts as zero. `decay` is the
    /// L2 coefficient λ of a `λ‖θ‖²` penalty, applied as its exact gradient
    /// `2λθ` outside the adaptive moments.
    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: Option<&Tensor>, decay: f64) {
        assert!(self.step > 0, "begin_step must precede update");
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        assert_eq!(m.len(), param.len(), "optimizer slot {slot} size mismatch");
        let g = grad.map(Tensor::data);
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let step = (m[i] / c1) / ((v[i] / c2).sqrt() + EPSILON);
            let old = *p;
            *p = old - self.lr * step;
            if decay != 0.0 {
                *p -= self.lr * 2.0 * decay * old;
            }
        }
    }
}
