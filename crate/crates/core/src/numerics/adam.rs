use serde::{Deserialize, Serialize};

use super::{GradientMap, NumericsError, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in f64; parameters stay f32.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.numel()])
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. A parameter without a gradient is treated as
    /// having a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradientMap) -> Result<(), NumericsError> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(NumericsError::Shape(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (id, p) in params.iter() {
            if self.first_moment[id.index()].len() != p.tensor.numel() {
                return Err(NumericsError::Shape(format!(
                    "moment size for {} does not match its shape {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
            if let Some(g) = grads.get(id) {
                if g.shape() != p.tensor.shape() {
                    return Err(NumericsError::Shape(format!(
                        "gradient for {} has shape {:?}, parameter has {:?}",
                        p.name,
                        g.shape(),
                        p.tensor.shape()
                    )));
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);

        for (id, p) in params.iter_mut() {
            let m = &mut self.first_moment[id.index()];
            let v = &mut self.second_moment[id.index()];
            let grad = grads.get(id).map(|g| g.data());
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[k] as f64);
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / correction1;
                let v_hat = v[k] / correction2;
                *w = (*w as f64 - learning_rate * m_hat / (v_hat.sqrt() + epsilon)) as f32;
            }
            p.tensor.ensure_finite("adam_step")?;
        }
        Ok(())
    }
}
