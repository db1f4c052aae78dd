//! Adam with per-tensor learning rates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    /// Zeroes both moment buffers and the bias-correction counter.
    pub fn reset(&mut self) {
        self.step = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lrs: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), lrs.len());
        self.step += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let eps = T::of(self.config.eps);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let step = T::of(lrs[k] / c1);
            let inv_c2 = T::of(1.0 / c2);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = tb1 * m[i] + (T::one() - tb1) * g[i];
                v[i] = tb2 * v[i] + (T::one() - tb2) * g[i] * g[i];
                *x -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::<f32>::from_f64(1, 2, &[0.5, -0.5]);
        let mut adam = Adam::new(AdamConfig::default(), &[(1, 2)]);
        for _ in 0..5 {
            adam.update(&mut [&mut p], &[Tensor::zeros(1, 2)], &[1e-2]);
        }
        assert_eq!(p.data(), &[0.5, -0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::from_f64(1, 1, &[1.0]);
        let mut adam = Adam::new(AdamConfig { eps: 0.0, ..Default::default() }, &[(1, 1)]);
        adam.update(&mut [&mut p], &[Tensor::scalar(3.0)], &[0.1]);
        assert!((p.item() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::<f64>::from_f64(1, 1, &[3.0]);
        let mut adam = Adam::new(AdamConfig { eps: 1e-8, ..Default::default() }, &[(1, 1)]);
        for _ in 0..2000 {
            let g = Tensor::scalar(2.0 * (p.item() - 1.0));
            adam.update(&mut [&mut p], &[g], &[1e-2]);
        }
        assert!((p.item() - 1.0).abs() < 1e-2);
    }
}
