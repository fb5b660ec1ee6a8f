//! Adam with bias correction.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
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
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment estimates for every entry of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore<f32>) -> Self {
        let zeros = || store.iter().map(|(_, t, _)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; `None` and
    /// buffers are treated as zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) {
        debug_assert_eq!(grads.len(), store.len());
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (c.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        for (id, grad) in grads.iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = grad.as_ref().map_or(0.0, |g| g.data()[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }

    pub fn write_blob(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(b"PGAD")?;
        out.write_all(&self.step.to_le_bytes())?;
        out.write_all(&(self.m.len() as u32).to_le_bytes())?;
        for t in self.m.iter().chain(&self.v) {
            out.write_all(&(t.len() as u64).to_le_bytes())?;
            for &x in t.data() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Restores moments written by [`Adam::write_blob`] for parameters shaped
    /// like `store`.
    pub fn read_blob(config: AdamConfig, store: &ParamStore<f32>, input: &mut impl Read) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("optimizer state: {m}"));
        let io = |e: std::io::Error| bad(e.to_string());
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != b"PGAD" {
            return Err(bad("bad magic".into()));
        }
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b8).map_err(io)?;
        let step = u64::from_le_bytes(b8);
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4).map_err(io)?;
        if u32::from_le_bytes(b4) as usize != store.len() {
            return Err(bad("entry count does not match the architecture".into()));
        }
        let mut adam = Adam::new(config, store);
        adam.step = step;
        for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            input.read_exact(&mut b8).map_err(io)?;
            if u64::from_le_bytes(b8) as usize != t.len() {
                return Err(bad("tensor size does not match the architecture".into()));
            }
            for x in t.data_mut() {
                input.read_exact(&mut b4).map_err(io)?;
                *x = f32::from_le_bytes(b4);
            }
        }
        Ok(adam)
    }
}
