use serde::{Deserialize, Serialize};

use super::{Gradients, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Bias-corrected Adam over the flattened parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, net: &Mlp) -> Self {
        let n = net.num_params();
        Adam { config, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Applies one update in place. On error neither the parameters nor the
    /// optimizer state change.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.len() != self.m.len() || net.num_params() != self.m.len() {
            return Err(Error::shape(format!("{} parameters", self.m.len()), grads.len()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut k = 0;
        for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
            for (p, &gi) in layer
                .weights
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .zip(g.weights.iter().chain(g.bias.iter()))
            {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
                k += 1;
            }
        }
        Ok(())
    }
}
