// SPDX-License-Identifier: Apache-2.0

//! Adam and momentum SGD over named parameter arrays.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RiaError};
use crate::model::ClassifierModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    /// Default optimizer for a model template: momentum SGD for the VGG-style
    /// template, Adam otherwise.
    pub fn for_template(template: &str) -> Self {
        if template == "tiny-vgg" {
            OptimizerKind::Sgd
        } else {
            OptimizerKind::Adam
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerKind::Adam => 1e-3,
            OptimizerKind::Sgd => 1e-2,
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Optimizer settings; unset name and learning rate follow the model template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(default)]
    pub name: Option<OptimizerKind>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            name: None,
            lr: None,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

impl OptimizerSpec {
    pub fn resolve(&self, template: &str) -> Result<ResolvedOptimizer> {
        let kind = self.name.unwrap_or_else(|| OptimizerKind::for_template(template));
        let lr = self.lr.unwrap_or_else(|| kind.default_lr());
        let r = ResolvedOptimizer {
            kind,
            lr,
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        };
        r.validate()?;
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedOptimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl ResolvedOptimizer {
    fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(RiaError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer with per-parameter state slots (`m`, `v` for Adam; `buf` for SGD).
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub settings: ResolvedOptimizer,
    pub steps: u64,
    pub slots: BTreeMap<String, BTreeMap<String, ArrayD<f64>>>,
}

impl Optimizer {
    pub fn new(settings: ResolvedOptimizer) -> Self {
        Optimizer {
            settings,
            steps: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, model: &mut ClassifierModel, grads: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        self.steps += 1;
        let s = self.settings.clone();
        let t = self.steps as i32;
        for (name, p) in model.params_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(RiaError::Input(format!("gradient for {name} has the wrong shape")));
            }
            let slots = self.slots.entry(name.clone()).or_default();
            match s.kind {
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - s.beta1.powi(t);
                    let bc2 = 1.0 - s.beta2.powi(t);
                    let m = slots.entry("m".into()).or_insert_with(|| ArrayD::zeros(p.raw_dim()));
                    Zip::from(&mut *m).and(g).for_each(|m, &g| *m = s.beta1 * *m + (1.0 - s.beta1) * g);
                    let m = m.clone();
                    let v = slots.entry("v".into()).or_insert_with(|| ArrayD::zeros(p.raw_dim()));
                    Zip::from(&mut *v).and(g).for_each(|v, &g| *v = s.beta2 * *v + (1.0 - s.beta2) * g * g);
                    Zip::from(&mut *p).and(&m).and(&*v).for_each(|p, &m, &v| {
                        let update = (m / bc1) / ((v / bc2).sqrt() + s.eps);
                        *p -= s.lr * (update + s.weight_decay * *p);
                    });
                }
                OptimizerKind::Sgd => {
                    let buf = slots.entry("buf".into()).or_insert_with(|| ArrayD::zeros(p.raw_dim()));
                    Zip::from(&mut *buf)
                        .and(g)
                        .and(&*p)
                        .for_each(|b, &g, &p| *b = s.momentum * *b + g + s.weight_decay * p);
                    Zip::from(&mut *p).and(&*buf).for_each(|p, &b| *p -= s.lr * b);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn template_defaults() {
        let a = OptimizerSpec::default().resolve("tiny-cnn-3block").unwrap();
        assert_eq!((a.kind, a.lr), (OptimizerKind::Adam, 1e-3));
        let s = OptimizerSpec::default().resolve("tiny-vgg").unwrap();
        assert_eq!((s.kind, s.lr), (OptimizerKind::Sgd, 1e-2));
        let bad = OptimizerSpec {
            lr: Some(-1.0),
            ..Default::default()
        };
        assert!(bad.resolve("tiny-vgg").is_err());
    }

    fn one_param_grads(model: &ClassifierModel, value: f64) -> BTreeMap<String, ArrayD<f64>> {
        model
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), ArrayD::from_elem(v.raw_dim(), value)))
            .collect()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut model = ClassifierModel::build(&ModelConfig::new("tiny-1conv", 3, 1)).unwrap();
        let before = model.params().clone();
        let mut opt = Optimizer::new(OptimizerSpec::default().resolve("tiny-1conv").unwrap());
        let g = one_param_grads(&model, 0.3);
        opt.step(&mut model, &g).unwrap();
        for (k, v) in model.params() {
            for (a, b) in v.iter().zip(before[k].iter()) {
                assert!((b - a - 1e-3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut model = ClassifierModel::build(&ModelConfig::new("tiny-1conv", 3, 1)).unwrap();
        let before = model.params().clone();
        let spec = OptimizerSpec {
            name: Some(OptimizerKind::Sgd),
            lr: Some(0.1),
            ..Default::default()
        };
        let mut opt = Optimizer::new(spec.resolve("tiny-1conv").unwrap());
        let g = one_param_grads(&model, 1.0);
        opt.step(&mut model, &g).unwrap();
        opt.step(&mut model, &g).unwrap();
        // Two steps move by 0.1·1 + 0.1·(0.9 + 1).
        for (k, v) in model.params() {
            for (a, b) in v.iter().zip(before[k].iter()) {
                assert!((b - a - 0.29).abs() < 1e-12);
            }
        }
    }
}
