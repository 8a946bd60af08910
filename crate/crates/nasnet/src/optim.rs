use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adam over the parameters of one [`ParamKind`]. Moments are kept in f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub kind: ParamKindTag,
    pub step: u64,
    pub first: BTreeMap<usize, Vec<f64>>,
    pub second: BTreeMap<usize, Vec<f64>>,
}

/// Serializable mirror of the trainable [`ParamKind`]s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKindTag {
    Weight,
    Arch,
}

impl ParamKindTag {
    fn matches(self, kind: ParamKind) -> bool {
        matches!(
            (self, kind),
            (ParamKindTag::Weight, ParamKind::Weight) | (ParamKindTag::Arch, ParamKind::Arch)
        )
    }
}

impl Adam {
    pub fn new(cfg: AdamConfig, kind: ParamKindTag) -> Self {
        Self {
            cfg,
            kind,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn update<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)]) {
        let relevant: Vec<&(ParamId, Vec<T>)> = grads
            .iter()
            .filter(|(id, _)| {
                let p = store.get(*id);
                p.trainable && self.kind.matches(p.kind)
            })
            .collect();
        if relevant.is_empty() {
            return;
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in relevant {
            let m = self.first.entry(id.0).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(id.0).or_insert_with(|| vec![0.0; g.len()]);
            let p = store.get_mut(*id).value.data_mut();
            for i in 0..g.len() {
                let gi = g[i].as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                if c.lr != 0.0 {
                    let upd = c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                    p[i] = T::from_f64(p[i].as_f64() - upd);
                }
            }
        }
    }
}
