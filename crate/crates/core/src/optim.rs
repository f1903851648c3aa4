//! AdamW with global gradient-norm clipping.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::params::{ParamStore, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// Decay applies to weight matrices and adapter factors, not to biases,
/// norms, embeddings tables or the temperature.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w") || name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    /// Keyed by parameter name.
    pub state: BTreeMap<String, Moments>,
}

/// Scales `grads` in place so their joint L2 norm is at most `max`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [(usize, Array2<f64>)], max: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max && norm > 0.0 {
        let s = max / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update over the parameters that received a gradient. Frozen
    /// parameters are skipped even if a gradient is supplied. Returns the
    /// gradient norm before clipping.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        mut grads: Vec<(usize, Array2<f64>)>,
        precision: Precision,
    ) -> f64 {
        grads.retain(|(i, _)| params.get(*i).trainable);
        let norm = match self.config.clip_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (idx, g) in grads {
            let p = params.get_mut(idx);
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Array2::zeros(p.value.raw_dim()),
                v: Array2::zeros(p.value.raw_dim()),
            });
            let decay = if decays(&p.name) { c.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut p.value)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(&g)
                .for_each(|w, m, v, &g| {
                    *m = precision.round(c.beta1 * *m + (1.0 - c.beta1) * g);
                    *v = precision.round(c.beta2 * *v + (1.0 - c.beta2) * g * g);
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    let next = *w - c.lr * (mhat / (vhat.sqrt() + c.eps) + decay * *w);
                    *w = precision.round(next);
                });
        }
        norm
    }
}
