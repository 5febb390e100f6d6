//! Stochastic gradient descent and the poly learning-rate schedule.

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Exponent of the poly schedule.
pub const POLY_POWER: f64 = 0.9;

/// `base_lr · (1 − iteration / max_iterations)^0.9`, clamped to `[0, base_lr]`.
pub fn poly_lr(iteration: usize, max_iterations: usize, base_lr: f64) -> f64 {
    if max_iterations == 0 {
        return base_lr;
    }
    let progress = (iteration as f64 / max_iterations as f64).min(1.0);
    base_lr * (1.0 - progress).powf(POLY_POWER)
}

/// Plain step `value ← value − lr · grad`; gradients are cleared afterwards.
pub fn sgd_step(store: &mut ParamStore, learning_rate: f64) {
    Sgd::new(0.0, 0.0).step(store, learning_rate);
}

/// SGD with optional heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, learning_rate: f64) {
        if self.momentum != 0.0 && self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        }
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let mut grad = store.grad(id).clone();
            if self.weight_decay != 0.0 {
                for (g, v) in grad.data_mut().iter_mut().zip(store.value(id).data()) {
                    *g += self.weight_decay * v;
                }
            }
            let update = if self.momentum != 0.0 {
                let vel = &mut self.velocity[id.index()];
                for (v, g) in vel.data_mut().iter_mut().zip(grad.data()) {
                    *v = self.momentum * *v + g;
                }
                vel.clone()
            } else {
                grad
            };
            let value = store.value_mut(id);
            for (w, u) in value.data_mut().iter_mut().zip(update.data()) {
                *w -= learning_rate * u;
            }
        }
        store.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0, 1000, 1e-3), 1e-3);
        assert_eq!(poly_lr(1000, 1000, 1e-3), 0.0);
        let half = poly_lr(500, 1000, 1e-3);
        assert!((half - 1e-3 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((half - 5.359e-4).abs() < 1e-7);
    }

    #[test]
    fn poly_schedule_is_non_increasing() {
        let lrs: Vec<f64> = (0..=200).map(|i| poly_lr(i, 200, 0.01)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sgd_updates_and_clears() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::ones(&[2])).unwrap();
        store.accumulate_grad(id, &Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        sgd_step(&mut store, 0.5);
        assert_eq!(store.value(id).data(), &[0.5, 2.0]);
        assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[1])).unwrap();
        let mut opt = Sgd::new(0.9, 0.0);
        for _ in 0..2 {
            store.accumulate_grad(id, &Tensor::scalar(1.0));
            opt.step(&mut store, 1.0);
        }
        // v1 = 1, v2 = 1.9
        assert!((store.value(id).data()[0] + 2.9).abs() < 1e-12);
    }
}
