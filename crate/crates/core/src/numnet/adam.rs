use serde::{Deserialize, Serialize};

use super::network::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam moments for one parameter set.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl AdamState {
    /// Zero-initialized moments shaped like the parameters of `model`.
    pub fn new<P: Parameterized + ?Sized>(model: &mut P, config: AdamConfig) -> Self {
        let mut sizes = Vec::new();
        model.for_each_param(&mut |p, _| sizes.push(p.len()));
        Self {
            config,
            step_count: 0,
            first_moment: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            second_moment: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the gradients currently stored in `model`.
    /// Gradients are left as they are.
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P) {
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - (beta1 as f64).powi(t);
        let bc2 = 1.0 - (beta2 as f64).powi(t);
        let step_size = (learning_rate as f64 / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let mut idx = 0;
        let (ms, vs) = (&mut self.first_moment, &mut self.second_moment);
        model.for_each_param(&mut |params, grads| {
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            assert_eq!(m.len(), params.len(), "parameter layout changed under Adam");
            for ((p, g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= step_size * *m / (v.sqrt() * inv_bc2_sqrt + epsilon);
            }
            idx += 1;
        });
    }
}
