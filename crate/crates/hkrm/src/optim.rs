//! SGD with classical momentum and weight decay folded into the gradient.
//!
//! Update rule, per parameter:
//!
//! ```text
//! v ← momentum·v − lr·(grad + weight_decay·param)
//! param ← param + v
//! ```
//!
//! Velocity buffers are keyed by parameter name so their shapes always
//! mirror the parameters they belong to.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, key_prefix: &str) -> Result<()> {
        // Zero is allowed so diagnostic no-op runs can share the pipeline.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(
                format!("{key_prefix}.learning_rate"),
                format!("must be a nonnegative finite float, got {}", self.learning_rate),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                format!("{key_prefix}.momentum"),
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::config(
                format!("{key_prefix}.weight_decay"),
                format!("must be nonnegative, got {}", self.weight_decay),
            ));
        }
        Ok(())
    }
}

/// One SGD update on a flat parameter slice.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], cfg: &SgdConfig) {
    assert_eq!(param.len(), grad.len(), "param/grad length mismatch");
    assert_eq!(param.len(), velocity.len(), "param/velocity length mismatch");
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v - cfg.learning_rate * (g + cfg.weight_decay * *p);
        *p += *v;
    }
}

/// Optimizer state: config plus one velocity buffer per named parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    /// Updates one named parameter. A non-finite gradient aborts the step
    /// with diagnostics rather than poisoning the parameters.
    pub fn step(&mut self, name: &str, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != param.len() {
            return Err(Error::shape(
                format!("sgd_step({name})"),
                param.len(),
                grad.len(),
            ));
        }
        if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for `{name}` at index {bad}: {}",
                grad[bad]
            )));
        }
        let velocity = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        if velocity.len() != param.len() {
            return Err(Error::shape(
                format!("sgd velocity for {name}"),
                param.len(),
                velocity.len(),
            ));
        }
        sgd_step(param, grad, velocity, &self.cfg);
        Ok(())
    }
}
