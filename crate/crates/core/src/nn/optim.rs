//! Optimizers over flat parameter vectors.

use crate::scalar::Scalar;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [T], grads: &[T]) {
        self.step_with_lr(params, grads, self.lr);
    }

    pub fn step_with_lr<T: Scalar>(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i].as_f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let mut p = params[i].as_f64();
            p -= lr * self.weight_decay * p;
            p -= lr * mhat / (vhat.sqrt() + self.eps);
            params[i] = T::lit(p);
        }
    }
}

/// Plain stochastic gradient descent with L2 weight decay folded into the
/// gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<T: Scalar>(&self, params: &mut [T], grads: &[T]) {
        for (p, &g) in params.iter_mut().zip(grads) {
            let pv = p.as_f64();
            *p = T::lit(pv - self.lr * (g.as_f64() + self.weight_decay * pv));
        }
    }
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| *g = *g * s);
    }
    norm
}
