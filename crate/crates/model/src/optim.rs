use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let theta = var.as_tensor().detach();
            let mut g = g.detach();
            if c.weight_decay != 0.0 {
                g = (g + theta.affine(c.weight_decay, 0.0)?)?;
            }
            let (m, v) = match self.moments.remove(name) {
                Some((m, v)) => (m, v),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = (m.affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?;
            let v = (v.affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?;
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, c.eps)?;
            let update = m.affine(c.lr / bc1, 0.0)?.div(&denom)?;
            var.set(&(theta - update)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{InitScheme, ParamSpec};
    use candle_core::DType;

    #[test]
    fn matches_scalar_reference() {
        let spec = ParamSpec {
            name: "w".into(),
            shape: vec![2],
            init: InitScheme::Constant(1.5),
            fan_in: 1,
            fan_out: 1,
        };
        let params = ParamStore::init(&[spec], 0, DType::F64).unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg);
        // loss = sum(w^2 * k) with k = (1, 3)
        let k = Tensor::new(&[1.0f64, 3.0], &candle_core::Device::Cpu).unwrap();
        let mut reference = [(1.5f64, 0.0f64, 0.0f64); 2];
        for t in 1..=5 {
            let w = params.get("w").as_tensor();
            let loss = w.sqr().unwrap().mul(&k).unwrap().sum_all().unwrap();
            adam.step(&params, &loss.backward().unwrap()).unwrap();
            for (i, kk) in [1.0, 3.0].iter().enumerate() {
                let (th, m, v) = &mut reference[i];
                let g = 2.0 * kk * *th + 0.01 * *th;
                *m = 0.9 * *m + 0.1 * g;
                *v = 0.999 * *v + 0.001 * g * g;
                let mh = *m / (1.0 - 0.9f64.powi(t));
                let vh = *v / (1.0 - 0.999f64.powi(t));
                *th -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got = params.get("w").as_tensor().to_vec1::<f64>().unwrap();
        for (g, r) in got.iter().zip(reference) {
            assert!((g - r.0).abs() < 1e-12, "{g} vs {}", r.0);
        }
    }
}
