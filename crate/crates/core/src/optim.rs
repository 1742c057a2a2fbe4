//! Adam optimizer over a named weight map.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state: step count plus first/second moments per weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of every weight that has a gradient.
    pub fn update(
        &mut self,
        weights: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = (c.lr / bc1) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let eps = c.eps as f32;
        for (name, g) in grads {
            let w = weights
                .get_mut(name)
                .ok_or_else(|| Error::invalid("adam", format!("unknown weight {name}")))?;
            if w.shape() != g.shape() {
                return Err(Error::shape("adam", w.shape(), g.shape()));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (wv, &gv)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * gv;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gv * gv;
                *wv -= step_size * md[i] / (vd[i].sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
