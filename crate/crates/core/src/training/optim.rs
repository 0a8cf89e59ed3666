//! RAdam (with an Adam fallback) and global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Grads, ParamId, ParamStore, Precision, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Radam,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radam" => Ok(OptimizerKind::Radam),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Per-parameter first and second moments plus the shared step count.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    state: BTreeMap<ParamId, Moments>,
}

/// Length of the approximated simple moving average at step `t`.
pub fn sma_length(beta2: f64, t: u64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(t as i32);
    rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// One update of every trainable parameter present in `grads`.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, precision: Precision) -> Result<()> {
        for (id, g) in grads.iter() {
            if let Some(k) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at coordinate {k} is {}",
                    store.get(id).name,
                    g.data()[k]
                )));
            }
        }
        self.step += 1;
        let t = self.step;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
        let rho = sma_length(c.beta2, t);
        let rect = (rho > 4.0).then(|| {
            ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
        });
        for (id, g) in grads.iter() {
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let value = param.value.data_mut();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for k in 0..value.len() {
                let gk = g.data()[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let mut theta = value[k] * (1.0 - c.lr * c.weight_decay);
                theta -= match (c.kind, rect) {
                    (OptimizerKind::Radam, Some(r)) => c.lr * r * m_hat * bc2.sqrt() / (v[k].sqrt() + c.eps),
                    (OptimizerKind::Radam, None) => c.lr * m_hat,
                    (OptimizerKind::Adam, _) => c.lr * m_hat / ((v[k] / bc2).sqrt() + c.eps),
                };
                value[k] = precision.round(theta);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::domain("clip_global_norm", format!("max_norm {max_norm}")));
    }
    let norm = grads.norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    Ok(norm)
}
