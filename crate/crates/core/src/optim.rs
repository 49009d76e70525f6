//! First-order optimizers over a [`ParamStore`] and the cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum and L2 weight decay.
    Sgd,
    /// Adam with decoupled weight decay.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Gradients are rescaled so their global L2 norm stays below this.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("momentum and betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} is negative", self.weight_decay)));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total` under cosine annealing to zero.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: BTreeMap<String, DenseMatrix>,
    second: BTreeMap<String, DenseMatrix>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies the accumulated gradients of every trainable parameter at
    /// learning rate `lr`, then clears them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.steps += 1;
        if let Some(limit) = self.config.clip_norm {
            let norm = store
                .iter()
                .filter(|(_, p)| p.requires_grad)
                .map(|(_, p)| p.gradient.data().iter().map(|g| g * g).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    context: "gradient norm".into(),
                });
            }
            if norm > limit {
                let c = limit / norm;
                for (_, p) in store.iter_mut() {
                    p.gradient = p.gradient.scale(c);
                }
            }
        }
        let c = self.config.clone();
        let t = self.steps as f64;
        for (key, p) in store.iter_mut().filter(|(_, p)| p.requires_grad) {
            let shape = p.value.shape();
            match c.kind {
                OptimizerKind::Sgd => {
                    let mut g = p.gradient.clone();
                    g.axpy(c.weight_decay, &p.value)?;
                    let v = self.first.entry(key.clone()).or_insert_with(|| DenseMatrix::zeros(shape.0, shape.1));
                    *v = v.scale(c.momentum);
                    v.add_assign(&g)?;
                    p.value.axpy(-lr, v)?;
                }
                OptimizerKind::Adam => {
                    let g = &p.gradient;
                    let m = self.first.entry(key.clone()).or_insert_with(|| DenseMatrix::zeros(shape.0, shape.1));
                    *m = m.zip_map(g, |m, g| c.beta1 * m + (1.0 - c.beta1) * g)?;
                    let v = self.second.entry(key.clone()).or_insert_with(|| DenseMatrix::zeros(shape.0, shape.1));
                    *v = v.zip_map(g, |v, g| c.beta2 * v + (1.0 - c.beta2) * g * g)?;
                    let (b1, b2) = (1.0 - c.beta1.powf(t), 1.0 - c.beta2.powf(t));
                    let update = m.zip_map(v, |m, v| (m / b1) / ((v / b2).sqrt() + 1e-8))?;
                    let decay = c.weight_decay;
                    p.value = p.value.zip_map(&update, |x, u| x - lr * (u + decay * x))?;
                }
            }
            p.reset_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Parameter;

    fn quadratic_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("x", Parameter::new(DenseMatrix::row_vector(&[3.0, -2.0])));
        store
    }

    fn minimize(kind: OptimizerKind, lr: f64) -> DenseMatrix {
        let mut store = quadratic_store();
        let mut opt = Optimizer::new(OptimizerConfig {
            kind,
            learning_rate: lr,
            weight_decay: 0.0,
            clip_norm: None,
            ..OptimizerConfig::default()
        })
        .unwrap();
        for _ in 0..500 {
            let x = store.value("x").unwrap().clone();
            store.accumulate(vec![("x".into(), x.scale(2.0))]).unwrap();
            opt.step(&mut store, lr).unwrap();
        }
        store.value("x").unwrap().clone()
    }

    #[test]
    fn both_optimizers_reach_the_minimum() {
        assert!(minimize(OptimizerKind::Sgd, 0.05).max_abs() < 1e-6);
        assert!(minimize(OptimizerKind::Adam, 0.05).max_abs() < 1e-2);
    }

    #[test]
    fn first_sgd_step_is_plain_gradient_plus_decay() {
        let mut store = quadratic_store();
        let mut opt = Optimizer::new(OptimizerConfig {
            clip_norm: None,
            ..OptimizerConfig::default()
        })
        .unwrap();
        store.accumulate(vec![("x".into(), DenseMatrix::row_vector(&[1.0, 1.0]))]).unwrap();
        opt.step(&mut store, 0.1).unwrap();
        let x = store.value("x").unwrap();
        assert!((x.get(0, 0) - (3.0 - 0.1 * (1.0 + 5e-4 * 3.0))).abs() < 1e-15);
        assert_eq!(store.get("x").unwrap().gradient.max_abs(), 0.0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("f", Parameter::frozen(DenseMatrix::ones(1, 2)));
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        opt.step(&mut store, 1.0).unwrap();
        assert_eq!(store.value("f").unwrap(), &DenseMatrix::ones(1, 2));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Optimizer::new(OptimizerConfig {
            learning_rate: 0.0,
            ..OptimizerConfig::default()
        })
        .is_err());
        assert!(Optimizer::new(OptimizerConfig {
            momentum: 1.0,
            ..OptimizerConfig::default()
        })
        .is_err());
    }
}
