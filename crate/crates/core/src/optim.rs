//! Adam with bias-corrected moments and a constant learning rate.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{MrtError, Result};
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads` follows store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(MrtError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (param, grad)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            if param.shape() != grad.shape() {
                return Err(MrtError::dim("adam_step", param.shape(), grad.shape()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0, 0.0]));
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &[Tensor::vector(vec![3.0, -0.5, 0.0])]).unwrap();
        let w = store.tensors()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![5.0]));
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let x = store.tensors()[0].data()[0];
            adam.step(&mut store, &[Tensor::vector(vec![2.0 * (x - 1.0)])]).unwrap();
        }
        assert!((store.tensors()[0].data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_wrong_gradient_count() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![5.0]));
        let mut adam = Adam::new(&store, 0.1);
        assert!(adam.step(&mut store, &[]).is_err());
    }
}
