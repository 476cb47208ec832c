use super::{ParamStore, Tensor};

/// Adam over a [`ParamStore`]'s accumulated gradients.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter for which `trainable(name)` holds.
    pub fn step(&mut self, store: &mut ParamStore, trainable: impl Fn(&str) -> bool) {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            if !trainable(&p.name) {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= c);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![3.0, -2.0])).unwrap();
        let mut opt = Adam::new(0.1, 1e-8);
        for _ in 0..500 {
            store.zero_gradients();
            let g = {
                let mut tape = Tape::new(&store);
                let x = tape.param(id);
                let sq = tape.square(x);
                let l = tape.sum(sq);
                tape.backward(l).unwrap()
            };
            store.accumulate(&g);
            opt.step(&mut store, |_| true);
        }
        assert!(store.value(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(1.0)).unwrap();
        store.add("b", Tensor::scalar(1.0)).unwrap();
        for p in store.iter_mut() {
            p.grad = Tensor::scalar(1.0);
        }
        let mut opt = Adam::new(0.1, 1e-8);
        opt.step(&mut store, |n| n != "b");
        assert!(store.value(store.id("a").unwrap()).item() < 1.0);
        assert_eq!(store.value(store.id("b").unwrap()).item(), 1.0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::vector(vec![0.0, 0.0])).unwrap();
        store.iter_mut().next().unwrap().grad = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }
}
