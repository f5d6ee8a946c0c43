use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; non-positive disables clipping.
    pub clip_norm: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { learning_rate: 2e-3, decay: 0.99, epsilon: 1e-8, weight_decay: 0.0, clip_norm: 5.0, schedule: Schedule::Constant }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Cosine decay to zero over the stage.
    Cosine,
}

impl Schedule {
    pub fn factor(self, step: u64, total: u64) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine if total == 0 => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * (step as f64 / total as f64).min(1.0)).cos()),
        }
    }
}

/// RMSProp without momentum: a running mean of squared gradients per
/// parameter scales each update.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub config: OptimizerConfig,
    /// Squared-gradient averages, indexed like the parameter store.
    pub mean_square: Vec<Option<Tensor>>,
    pub steps: u64,
}

impl RmsProp {
    pub fn new(config: OptimizerConfig) -> Self {
        RmsProp { config, mean_square: Vec::new(), steps: 0 }
    }

    /// Applies one update with learning-rate multiplier `lr_factor`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr_factor: f64) {
        let c = &self.config;
        let mut scale = 1.0;
        if c.clip_norm > 0.0 {
            let norm = grads.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if norm > c.clip_norm {
                scale = c.clip_norm / norm;
            }
        }
        if self.mean_square.len() < store.len() {
            self.mean_square.resize(store.len(), None);
        }
        let lr = c.learning_rate * lr_factor;
        for (id, g) in grads {
            let ms = self.mean_square[id.index()].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let p = store.value_mut(*id);
            for ((w, m), &gr) in p.data_mut().iter_mut().zip(ms.data_mut()).zip(g.data()) {
                let gr = gr * scale + c.weight_decay * *w;
                *m = c.decay * *m + (1.0 - c.decay) * gr * gr;
                *w -= lr * gr / (m.sqrt() + c.epsilon);
            }
        }
        self.steps += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::row(&[3.0, -2.0]));
        let mut opt = RmsProp::new(OptimizerConfig { learning_rate: 0.05, ..Default::default() });
        for _ in 0..500 {
            let g = store.value(id).map(|x| 2.0 * x);
            opt.step(&mut store, &[(id, g)], 1.0);
        }
        assert!(store.value(id).data().iter().all(|x| x.abs() < 0.1));
    }

    #[test]
    fn cosine_schedule_ends_at_zero() {
        assert_eq!(Schedule::Cosine.factor(0, 10), 1.0);
        assert!(Schedule::Cosine.factor(10, 10).abs() < 1e-12);
        assert_eq!(Schedule::Constant.factor(7, 10), 1.0);
    }
}
