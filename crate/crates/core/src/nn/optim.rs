use serde::{Deserialize, Serialize};

use super::model::ParameterSet;
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment optimizer; moment buffers mirror the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParameterSet<T>) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// One descent step on the accumulated gradients.
    pub fn update(&mut self, params: &mut ParameterSet<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::c(lr * bc2.sqrt() / bc1);
        let eps = T::c(self.cfg.eps * bc2.sqrt());
        let (b1, b2) = (T::c(b1), T::c(b2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let grads: Vec<Tensor<T>> = params.grads().to_vec();
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(&grads).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = b1 * m.data[k] + one_b1 * gk;
                v.data[k] = b2 * v.data[k] + one_b2 * gk * gk;
                p.data[k] -= step_size * m.data[k] / (v.data[k].sqrt() + eps);
            }
        }
    }
}

/// Plain gradient step `p <- p - lr * g`.
pub fn sgd_step<T: Scalar>(params: &mut ParameterSet<T>, lr: f64) {
    let lr = T::c(lr);
    let grads: Vec<Tensor<T>> = params.grads().to_vec();
    for (p, g) in params.values_mut().iter_mut().zip(&grads) {
        for (a, &b) in p.data.iter_mut().zip(&g.data) {
            *a -= lr * b;
        }
    }
}

/// Global L2 norm of the gradients.
pub fn grad_norm<T: Scalar>(params: &ParameterSet<T>) -> f64 {
    params.grads().iter().flat_map(|g| g.data.iter()).map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParameterSet<T>, max_norm: f64) -> f64 {
    let n = grad_norm(params);
    if n > max_norm && n > 0.0 {
        let s = T::c(max_norm / n);
        for g in params.grads_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ParameterSet::<f64>::new();
        p.push("x", Tensor::from_f64(vec![2], &[3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..2000 {
            p.zero_grad();
            let x = p.get("x").unwrap().data.clone();
            p.grads_mut()[0].data = x.iter().map(|v| 2.0 * v).collect();
            opt.update(&mut p, 0.01);
        }
        assert!(p.get("x").unwrap().data.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn first_adam_step_has_lr_magnitude() {
        let mut p = ParameterSet::<f64>::new();
        p.push("x", Tensor::from_f64(vec![1], &[1.0]));
        p.grads_mut()[0].data[0] = 123.0;
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.update(&mut p, 0.1);
        assert!((p.get("x").unwrap().data[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping() {
        let mut p = ParameterSet::<f64>::new();
        p.push("x", Tensor::from_f64(vec![2], &[0.0, 0.0]));
        p.grads_mut()[0].data = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut p, 1.0), 5.0);
        assert!((grad_norm(&p) - 1.0).abs() < 1e-12);
    }
}
