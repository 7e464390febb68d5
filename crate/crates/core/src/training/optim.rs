use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tensor2D;
use crate::model::{ParamRole, ToyModel};

use super::backward::GradientSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

/// Optimizer plus its moment buffers. Only trainable parameters are touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub t: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut ToyModel, grads: &GradientSet, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        for (info, data) in model.params_mut() {
            if info.role != ParamRole::Trainable {
                continue;
            }
            let g = grads
                .get(&info.name)
                .ok_or_else(|| Error::UnknownParameter(info.name.clone()))?
                .data();
            match self.config {
                OptimizerConfig::Sgd => {
                    for (p, gi) in data.iter_mut().zip(g) {
                        *p -= lr * gi;
                    }
                }
                OptimizerConfig::AdamW { beta1, beta2, weight_decay, eps } => {
                    let m = self.first.entry(info.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.second.entry(info.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * data[i]);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor2D)> {
        let mut out = Vec::new();
        for (prefix, map) in [("opt.m.", &self.first), ("opt.v.", &self.second)] {
            for (name, buf) in map {
                let t = Tensor2D::from_vec(1, buf.len(), buf.clone()).expect("finite moments");
                out.push((format!("{prefix}{name}"), t));
            }
        }
        out
    }

    pub fn restore(config: OptimizerConfig, t: u64, tensors: &[(String, Tensor2D)]) -> Self {
        let mut opt = Optimizer::new(config);
        opt.t = t;
        for (name, tensor) in tensors {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                opt.first.insert(rest.to_string(), tensor.data().to_vec());
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                opt.second.insert(rest.to_string(), tensor.data().to_vec());
            }
        }
        opt
    }
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradientSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_in_place(max_norm / norm);
    }
    norm
}
