use serde::{Deserialize, Serialize};

use crate::model::{ModelParameters, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with one learning rate per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: ModelParameters,
    second: ModelParameters,
    steps: i32,
}

impl Adam {
    pub fn new(params: &ModelParameters, config: AdamConfig) -> Self {
        Adam {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update with `lr(group)` as the learning rate of each tensor.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &ModelParameters, lr: impl Fn(ParamGroup) -> f64) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let correction1 = 1.0 - beta1.powi(self.steps);
        let correction2 = 1.0 - beta2.powi(self.steps);
        let groups: Vec<ParamGroup> = params.tensors().iter().map(|t| t.component.group()).collect();
        let grad_views = grads.tensors();
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut());
        for (((p, m), v), (g, group)) in tensors.zip(grad_views.iter().zip(groups)) {
            let rate = lr(group);
            for i in 0..p.len() {
                let grad = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad * grad;
                if rate != 0.0 {
                    let m_hat = m[i] / correction1;
                    let v_hat = v[i] / correction2;
                    p[i] -= rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        params.clear_padding();
    }
}
