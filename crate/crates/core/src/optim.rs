//! Stochastic gradient descent with classical momentum.

use alloc::vec::Vec;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    /// `v <- mu v - lr g`, `w <- w + v` for every supplied gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads {
            let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi - self.lr * gi;
            }
            store.get_mut(*id).add_assign(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Builder;
    use crate::rng::seeded;

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let id = Builder::new(&mut store, &mut rng).uniform_fan_in("w", &[3], 3);
        let before = store.get(id).clone();
        let mut opt = Sgd::new(0.0, 0.937);
        for _ in 0..10 {
            opt.step(&mut store, &[(id, Tensor::ones(&[3]))]);
        }
        assert!(store.get(id).bit_eq(&before));
    }

    #[test]
    fn quadratic_without_momentum_matches_recurrence() {
        // f(w) = a/2 (w - c)^2, so w_{k+1} = w_k - lr a (w_k - c).
        let (a, c, lr) = (3.0, 1.5, 0.1);
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let id = Builder::new(&mut store, &mut rng).param("w", Tensor::scalar(4.0));
        let mut opt = Sgd::new(lr, 0.0);
        let mut w = 4.0;
        for _ in 0..50 {
            let g = a * (store.get(id).item() - c);
            opt.step(&mut store, &[(id, Tensor::scalar(g))]);
            w -= lr * a * (w - c);
            assert!((store.get(id).item() - w).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let id = Builder::new(&mut store, &mut rng).param("w", Tensor::scalar(0.0));
        let mut opt = Sgd::new(1.0, 0.5);
        opt.step(&mut store, &[(id, Tensor::scalar(1.0))]);
        opt.step(&mut store, &[(id, Tensor::scalar(1.0))]);
        // v1 = -1, v2 = -1.5
        assert_eq!(store.get(id).item(), -2.5);
    }
}
