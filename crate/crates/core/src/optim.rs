//! Adam with decoupled weight decay.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub(crate) step: u64,
    pub(crate) m: ParamStore,
    pub(crate) v: ParamStore,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Appends step count and moment estimates (exact `f64`).
    pub fn write_state(&self, w: &mut ByteWriter) {
        w.u64(self.step);
        w.blob(&self.m.to_bytes());
        w.blob(&self.v.to_bytes());
    }

    pub fn read_state(cfg: AdamWConfig, r: &mut ByteReader<'_>) -> Result<Self> {
        let step = r.u64("optimizer step")?;
        let m = ParamStore::from_bytes(r.blob("first moments")?)?;
        let v = ParamStore::from_bytes(r.blob("second moments")?)?;
        Ok(AdamW { cfg, step, m, v })
    }

    /// Applies one update to every parameter in `params` that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().map(String::from).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            if !self.m.contains(&name) {
                self.m.insert(name.clone(), Tensor::zeros(g.shape()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(&name).unwrap().data_mut();
            for (mi, gi) in m.iter_mut().zip(g.data()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            }
            let v = self.v.get_mut(&name).unwrap().data_mut();
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            }
            let m = self.m.get(&name).unwrap().data();
            let v = self.v.get(&name).unwrap().data();
            let p = params.get_mut(&name).unwrap().data_mut();
            for i in 0..p.len() {
                p[i] -= c.lr * c.weight_decay * p[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}
