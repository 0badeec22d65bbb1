use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Parameter;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            peak_lr: 1e-3,
            warmup: 4000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr > 0.0
            && self.warmup >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Linear warmup to `peak` at `step == warmup`, then inverse square-root decay.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning rate is defined from step 1".into()));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(if step <= warmup {
        peak * s / w
    } else {
        peak * (w / s).sqrt()
    })
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    /// Number of updates this parameter has received.
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam state keyed by parameter name. Moments are created on a parameter's
/// first update, so frozen parameters never get any.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    /// Global step; drives the learning-rate schedule.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        lr_at(step, self.config.peak_lr, self.config.warmup)
    }

    /// Drops the moments of the named parameters.
    pub fn drop_moments<'a>(&mut self, names: impl IntoIterator<Item = &'a str>) {
        for n in names {
            self.moments.remove(n);
        }
    }

    /// One bias-corrected Adam update of every trainable parameter that
    /// holds a gradient, at the learning rate of global step `step`.
    /// Frozen parameters and parameters without gradients are left alone.
    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Parameter>,
        step: u64,
    ) -> Result<()> {
        let lr = self.lr(step)?;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        for p in params {
            if !p.trainable() {
                continue;
            }
            let Some(grad) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let n = p.values().len();
            let mom = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| Moments {
                    t: 0,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
            if mom.m.len() != n || grad.len() != n {
                return Err(Error::Contract(format!(
                    "optimizer state for {} has {} entries, parameter has {n}, gradient {}",
                    p.name(),
                    mom.m.len(),
                    grad.len()
                )));
            }
            mom.t += 1;
            let c1 = 1.0 - beta1.powi(mom.t as i32);
            let c2 = 1.0 - beta2.powi(mom.t as i32);
            let values = p.tensor_mut().data_mut();
            for i in 0..n {
                let g = grad[i] as f64;
                let m = beta1 * mom.m[i] as f64 + (1.0 - beta1) * g;
                let v = beta2 * mom.v[i] as f64 + (1.0 - beta2) * g * g;
                mom.m[i] = m as f32;
                mom.v[i] = v as f32;
                let delta = lr * (m / c1) / ((v / c2).sqrt() + eps);
                values[i] = (values[i] as f64 - delta) as f32;
            }
        }
        Ok(())
    }
}
