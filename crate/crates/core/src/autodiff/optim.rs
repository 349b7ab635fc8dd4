use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update over every parameter in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    if let Some(missing) = names.iter().find(|n| store.grad(n).is_none()) {
        return Err(Error::MissingGradient(missing.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for name in &names {
        let grad = store.grad(name).expect("checked above").data().to_vec();
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
        let value = store.value_mut(name).expect("name from store");
        for (((p, g), m), v) in value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
