use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global-norm gradient clipping; `0` disables it.
    pub clip_norm: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// AdamW with optional gradient accumulation: gradients passed to
/// [`AdamW::accumulate`] are summed until [`AdamW::step`] averages and applies
/// them.
pub struct AdamW {
    cfg: AdamConfig,
    m: BTreeMap<ParamId, Vec<f32>>,
    v: BTreeMap<ParamId, Vec<f32>>,
    pending: BTreeMap<ParamId, Tensor>,
    pending_count: usize,
    t: u32,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            pending: BTreeMap::new(),
            pending_count: 0,
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    pub fn accumulate(&mut self, grads: BTreeMap<ParamId, Tensor>) {
        for (id, g) in grads {
            match self.pending.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.pending.insert(id, g);
                }
            }
        }
        self.pending_count += 1;
    }

    /// Applies the accumulated gradients. Returns the pre-clip global norm.
    pub fn step(&mut self, store: &mut ParamStore) -> f32 {
        if self.pending_count == 0 {
            return 0.0;
        }
        let inv = 1.0 / self.pending_count as f32;
        let mut sq = 0.0f64;
        for g in self.pending.values_mut() {
            g.scale_assign(inv);
            sq += g.data().iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>();
        }
        let norm = sq.sqrt() as f32;
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in std::mem::take(&mut self.pending) {
            let n = g.numel();
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
            let w = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
        }
        self.pending_count = 0;
        norm
    }
}

/// Linear warmup then cosine decay to `min_ratio * base`.
pub fn cosine_lr(base: f32, step: usize, total: usize, warmup: usize, min_ratio: f32) -> f32 {
    if step < warmup {
        return base * (step + 1) as f32 / warmup as f32;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f32 / span as f32).min(1.0);
    let cos = 0.5 * (1.0 + (std::f32::consts::PI * t).cos());
    base * (min_ratio + (1.0 - min_ratio) * cos)
}

/// Optimizer schedule shared by every training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup: usize,
    pub min_lr_ratio: f32,
    pub weight_decay: f32,
    pub clip_norm: f32,
    /// Micro-batches per optimizer step.
    pub grad_accum: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 3e-3,
            warmup: 20,
            min_lr_ratio: 0.1,
            weight_decay: 0.0,
            clip_norm: 1.0,
            grad_accum: 1,
        }
    }
}

impl Schedule {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        cosine_lr(self.lr, step, self.steps, self.warmup, self.min_lr_ratio)
    }
}
