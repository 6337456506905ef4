//! Adam with bias correction.

use evstream_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub lr: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        Self {
            lr,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let (one, eps) = (T::one(), T::of(EPS));
        let step = T::of(self.lr / c1);
        let c2 = T::of(c2);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                p.data[i] -= step * m.data[i] / ((v.data[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_keeps_params() {
        let mut p = vec![Tensor::from_vec(1, 2, vec![1.0, -2.0])];
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.0);
        adam.step(&mut p, &[Tensor::from_vec(1, 2, vec![3.0, 4.0])]);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::from_vec(1, 2, vec![0.0, 0.0])];
        let mut adam = Adam::new(&p, 0.1);
        adam.step(&mut p, &[Tensor::from_vec(1, 2, vec![3.0, -0.5])]);
        assert!((p[0].data[0] + 0.1).abs() < 1e-6);
        assert!((p[0].data[1] - 0.1).abs() < 1e-6);
    }
}
