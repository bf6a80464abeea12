use alloc::format;
use alloc::vec::Vec;

use super::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay: `p ← p − lr·wd·p` each step, independent of the moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }

    /// Updates every parameter in place from its accumulated gradient.
    /// Gradients are left as they are; the caller zeroes them.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::contract(format!("adam: parameter {i} has no gradient")));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| alloc::vec![T::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::contract("adam: parameter set changed between steps"));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let bias1 = 1.0 - num_traits::Float::powi(beta1, self.step.min(i32::MAX as u64) as i32);
        let bias2 = 1.0 - num_traits::Float::powi(beta2, self.step.min(i32::MAX as u64) as i32);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let step_size = T::from_f64(learning_rate / bias1);
        let inv_sqrt_bias2 = T::from_f64(1.0 / num_traits::Float::sqrt(bias2));
        let eps = T::from_f64(epsilon);
        let decay = T::from_f64(learning_rate * weight_decay);
        for ((param, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (data, grad) = param.parts_mut();
            let grad = grad.expect("checked above");
            for (((p, &g), mi), vi) in data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let denom = vi.sqrt() * inv_sqrt_bias2 + eps;
                *p = *p - step_size * *mi / denom - decay * *p;
            }
        }
        Ok(())
    }
}
