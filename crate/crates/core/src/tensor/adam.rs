//! Adam with decoupled-from-nothing, classic L2 weight decay.
//!
//! Per parameter element, with step count t starting at 1:
//!
//! ```text
//! g      = grad + weight_decay * theta
//! m      = beta1 * m + (1 - beta1) * g
//! v      = beta2 * v + (1 - beta2) * g^2
//! m_hat  = m / (1 - beta1^t)
//! v_hat  = v / (1 - beta2^t)
//! theta -= lr * m_hat / (sqrt(v_hat) + eps)
//! ```
//!
//! Weight decay is added to the gradient before the moment updates, so
//! it participates in both moments (classic L2, not AdamW).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// Optimizer state: first and second moments per parameter, allocated
/// lazily on the first step that sees each name.
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter. Every parameter must have
    /// a gradient; a missing entry is an error rather than a silent
    /// skip, so a broken backward pass cannot freeze weights unnoticed.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, theta) in params.iter_mut() {
            let grad = grads.get(name).ok_or_else(|| TensorError::MissingGrad(name.clone()))?;
            if grad.shape() != theta.shape() {
                return Err(super::shape_err(
                    "adam_step",
                    format!(
                        "gradient shape {:?} does not match parameter {name} {:?}",
                        grad.shape(),
                        theta.shape()
                    ),
                ));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; theta.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; theta.len()]);
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            for (((w, &g0), mi), vi) in
                theta.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                let g = g0 + self.cfg.weight_decay * *w;
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            if !theta.is_finite() {
                return Err(TensorError::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::scalar(value));
        m
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With zero decay and any nonzero gradient, bias correction makes
        // the first update exactly lr * sign(g).
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut params = single(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.37));
        let mut adam = AdamState::new(cfg);
        adam.step(&mut params, &grads).unwrap();
        let got = params["w"].item();
        let eps_shift = cfg.lr * cfg.eps; // eps keeps the step fractionally short
        assert!((got - (1.0 - cfg.lr)).abs() < eps_shift * 10.0 + 1e-12);
    }

    #[test]
    fn quadratic_converges_near_zero() {
        // Minimize theta^2 from theta = 1 with a larger lr to keep the
        // test quick; gradient is 2 * theta.
        let cfg = AdamConfig { lr: 1e-2, weight_decay: 0.0, ..AdamConfig::default() };
        let mut params = single(1.0);
        let mut adam = AdamState::new(cfg);
        for _ in 0..1000 {
            let g = 2.0 * params["w"].item();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::scalar(g));
            adam.step(&mut params, &grads).unwrap();
        }
        assert!(params["w"].item().abs() < 0.05);
    }

    #[test]
    fn weight_decay_enters_moments() {
        // With zero gradient, decay alone must still move the weight.
        let cfg = AdamConfig { weight_decay: 0.1, ..AdamConfig::default() };
        let mut params = single(2.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.0));
        let mut adam = AdamState::new(cfg);
        adam.step(&mut params, &grads).unwrap();
        assert!(params["w"].item() < 2.0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = single(1.0);
        let grads = BTreeMap::new();
        let mut adam = AdamState::new(AdamConfig::default());
        let e = adam.step(&mut params, &grads).unwrap_err();
        assert!(matches!(e, TensorError::MissingGrad(n) if n == "w"));
    }
}
