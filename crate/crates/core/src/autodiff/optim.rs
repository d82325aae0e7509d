use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with a constant learning rate. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Starts a new step; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, value: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if value.dims() != grad.dims() {
            return Err(Error::shape("adam", value.dims(), grad.dims()));
        }
        if self.step == 0 {
            return Err(Error::invalid("adam", "update before begin_step"));
        }
        let n = value.numel();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let c = self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut adam = Adam::<f64>::new(AdamConfig { lr: 0.1, ..Default::default() });
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        adam.begin_step();
        adam.update("p", &mut p, &g).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::<f64>::new(AdamConfig { lr: 0.05, ..Default::default() });
        let mut p = Tensor::new(vec![1], vec![4.0]).unwrap();
        for _ in 0..500 {
            let g = p.map(|x| 2.0 * (x - 1.5));
            adam.begin_step();
            adam.update("p", &mut p, &g).unwrap();
        }
        assert!((p.data()[0] - 1.5).abs() < 1e-2);
    }
}
