//! SGD with momentum, decoupled learning rates for backbone and head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr_backbone: f64,
    /// Bottleneck, batch norm and classifier.
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr_backbone: 1e-4, lr_head: 1e-3, momentum: 0.9, weight_decay: 1e-3 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_head", self.lr_head), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{prefix}.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("{prefix}.momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Momentum buffers, persisted in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub steps: u64,
}

#[derive(Clone, Debug)]
pub struct Sgd {
    config: OptimizerConfig,
    state: OptimizerState,
}

impl Sgd {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        Self { config, state: OptimizerState { velocity: vec![0.0; num_params], steps: 0 } }
    }

    pub fn with_state(config: OptimizerConfig, state: OptimizerState) -> Self {
        Self { config, state }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// `v <- mu * v + (g + wd * p)`, `p <- p - lr * v`.
    pub fn step(&mut self, model: &mut Model, grad: &[f64]) -> Result<()> {
        let groups = model.layout().groups();
        let params = model.params_mut();
        if grad.len() != params.len() || self.state.velocity.len() != params.len() {
            return Err(Error::Input(format!(
                "gradient length {} does not match {} parameters",
                grad.len(),
                params.len()
            )));
        }
        for (range, group) in groups {
            let lr = match group {
                ParamGroup::Backbone => self.config.lr_backbone,
                ParamGroup::Head => self.config.lr_head,
            };
            for i in range {
                let d = grad[i] + self.config.weight_decay * params[i];
                let v = self.config.momentum * self.state.velocity[i] + d;
                self.state.velocity[i] = v;
                params[i] -= lr * v;
            }
        }
        self.state.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_lr_and_zero_decay_leave_model_unchanged() {
        let mut model = Model::new(ModelConfig { embed_dim: 4, ..ModelConfig::default() }, 0).unwrap();
        let before = model.clone();
        let cfg = OptimizerConfig { lr_backbone: 0.0, lr_head: 0.0, ..OptimizerConfig::default() };
        let mut opt = Sgd::new(cfg, model.params().len());
        let grad = vec![1.0; model.params().len()];
        opt.step(&mut model, &grad).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn momentum_accumulates_per_group() {
        let mut model = Model::new(ModelConfig { embed_dim: 4, ..ModelConfig::default() }, 0).unwrap();
        let before = model.params().to_vec();
        let cfg = OptimizerConfig { lr_backbone: 0.1, lr_head: 1.0, momentum: 0.5, weight_decay: 0.0 };
        let mut opt = Sgd::new(cfg, before.len());
        let grad = vec![1.0; before.len()];
        opt.step(&mut model, &grad).unwrap();
        opt.step(&mut model, &grad).unwrap();
        let groups = model.layout().groups();
        let (bb, _) = &groups[0];
        let (hd, _) = &groups[1];
        // two steps: v1 = 1, v2 = 1.5 -> total displacement lr * 2.5
        assert!((before[bb.start] - model.params()[bb.start] - 0.25).abs() < 1e-12);
        assert!((before[hd.start] - model.params()[hd.start] - 2.5).abs() < 1e-12);
    }
}
