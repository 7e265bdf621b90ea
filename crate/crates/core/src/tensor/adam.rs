//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Parameter;

/// Adam state over a named parameter set. Defaults follow the training
/// setup used throughout this crate: lr 1e-4, beta1 0.9, beta2 0.99,
/// eps 1e-8.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over all parameters. Gradients are read but not cleared;
    /// the caller zeroes them between steps.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGrad {
                    name: p.name.clone(),
                })?
                .data()
                .to_vec();
            let n = p.numel();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let shape = p.value.shape().to_vec();
            let mut data = p.value.data().to_vec();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.value = crate::tensor::Tensor::new(shape, data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = Parameter::new("w", Tensor::scalar(1.0));
        p.grad = Some(Tensor::scalar(7.3));
        let mut adam = AdamState::new(0.01, 0.9, 0.99);
        adam.step(&mut [&mut p]).unwrap();
        // Bias-corrected first step is lr * g / (|g| + eps') ~= lr * sign(g).
        let moved = 1.0 - p.value.item();
        assert!((moved - 0.01).abs() < 1e-6, "moved {moved}");
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn zero_grad_is_identity() {
        let mut p = Parameter::new("w", Tensor::new(vec![2], vec![3.0, -4.0]).unwrap());
        p.grad = Some(Tensor::zeros(vec![2]));
        let mut adam = AdamState::new(0.1, 0.9, 0.99);
        for _ in 0..5 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value.data(), &[3.0, -4.0]);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut p = Parameter::new("stman.lstm.w_ih", Tensor::scalar(0.0));
        let mut adam = AdamState::new(0.1, 0.9, 0.99);
        let err = adam.step(&mut [&mut p]).unwrap_err();
        assert!(err.to_string().contains("stman.lstm.w_ih"));
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // Oracle run: 200 Adam steps on f(w) = (w - 3)^2 from w = 0.
        let mut p = Parameter::new("w", Tensor::scalar(0.0));
        let mut adam = AdamState::new(0.1, 0.9, 0.99);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let w = tape.leaf(p.value.clone(), true);
            let c = tape.constant(Tensor::scalar(3.0));
            let d = tape.sub(w, c).unwrap();
            let loss = tape.mul(d, d).unwrap();
            tape.backward(loss).unwrap();
            p.grad = Some(Tensor::new(vec![1], tape.grad(w).unwrap().to_vec()).unwrap());
            adam.step(&mut [&mut p]).unwrap();
            p.zero_grad();
        }
        assert!((p.value.item() - 3.0).abs() < 0.1, "w = {}", p.value.item());
    }
}
