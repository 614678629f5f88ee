use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with per-element step counts, so rows that are reset restart their
/// bias correction independently.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<Vec<u32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = |x| store.ids().map(|id| vec![x; store.get(id).numel()]).collect();
        Self {
            cfg,
            m: zeros(0.0),
            v: zeros(0.0),
            t: store.ids().map(|id| vec![0; store.get(id).numel()]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update. Parameters whose gradient is `None` are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(ParamId(i)).data_mut();
            let (m, v, t) = (&mut self.m[i], &mut self.v[i], &mut self.t[i]);
            // step counts are almost always uniform within a tensor
            let mut cached = (0, 1.0, 1.0);
            for j in 0..p.len() {
                t[j] += 1;
                if t[j] != cached.0 {
                    let n = t[j] as i32;
                    cached = (t[j], 1.0 - beta1.powi(n), 1.0 - beta2.powi(n));
                }
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / cached.1;
                let vh = v[j] / cached.2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Clears moments for `rows` of a parameter laid out as rows of `row_len`.
    pub fn reset_rows(&mut self, id: ParamId, rows: &[usize], row_len: usize) {
        let i = id.index();
        for &r in rows {
            let span = r * row_len..(r + 1) * row_len;
            self.m[i][span.clone()].fill(0.0);
            self.v[i][span.clone()].fill(0.0);
            self.t[i][span].fill(0);
        }
    }
}
