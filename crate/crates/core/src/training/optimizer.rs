use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// One update of `params` from `grads` (same order and sizes).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (((x, &gr), mk), vk) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gr;
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gr * gr;
                *x -= self.lr * self.weight_decay * *x;
                *x -= self.lr * (*mk / bc1) / ((*vk / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Learning rate under a single ×0.1 drop at `drop_epoch`.
pub fn step_decay(base_lr: f64, epoch: usize, drop_epoch: usize) -> f64 {
    if epoch >= drop_epoch {
        base_lr * 0.1
    } else {
        base_lr
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
