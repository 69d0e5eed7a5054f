//! Adam with global-norm clipping and per-entry freeze masks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Masks, Moments};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub type Grads<F> = BTreeMap<String, Tensor<F>>;

/// Global L2 norm over all gradient entries.
pub fn global_norm<F: Real>(grads: &Grads<F>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max`. Returns the norm
/// before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut Grads<F>, max: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max {
        let s = F::of(max / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Zeroes gradient entries of frozen positions.
pub fn mask_grads<F: Real>(grads: &mut Grads<F>, masks: &Masks) {
    for (name, g) in grads.iter_mut() {
        if let Some(mask) = masks.get(name) {
            for (v, &frozen) in g.data_mut().iter_mut().zip(&mask.frozen) {
                if frozen {
                    *v = F::zero();
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Grads<F>,
    pub v: Grads<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<F>) -> Self {
        let zeros: Grads<F> = params.iter().map(|(k, t)| (k.to_string(), Tensor::zeros(t.rows(), t.cols()))).collect();
        Adam { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn from_moments(cfg: AdamConfig, mo: &Moments, params: &ParamStore<F>) -> Result<Self> {
        let cast = |src: &BTreeMap<String, Tensor<f64>>| -> Grads<F> {
            src.iter().map(|(k, t)| (k.clone(), t.cast())).collect()
        };
        let adam = Adam { cfg, step: mo.step, m: cast(&mo.m), v: cast(&mo.v) };
        for (name, t) in params.iter() {
            let ok = |g: &Grads<F>| g.get(name).is_some_and(|x| x.shape() == t.shape());
            if !ok(&adam.m) || !ok(&adam.v) {
                return Err(Error::Checkpoint(format!("optimizer moments do not cover {name:?}")));
            }
        }
        if adam.m.len() != params.len() || adam.v.len() != params.len() {
            return Err(Error::Checkpoint("optimizer moments name unknown tensors".into()));
        }
        Ok(adam)
    }

    pub fn moments(&self) -> Moments {
        let cast = |src: &Grads<F>| src.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        Moments { step: self.step, m: cast(&self.m), v: cast(&self.v) }
    }

    /// One bias-corrected update. Frozen entries are left untouched,
    /// parameters and moments alike.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &Grads<F>, masks: Option<&Masks>) -> Result<()> {
        if grads.len() != params.len() || params.names().any(|n| !grads.contains_key(n)) {
            return Err(Error::Contract("gradient names do not match the parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::of(self.cfg.beta1), F::of(self.cfg.beta2));
        let c1 = F::one() - b1.powi(t);
        let c2 = F::one() - b2.powi(t);
        let lr = F::of(self.cfg.lr);
        let eps = F::of(self.cfg.eps);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let frozen = masks.and_then(|m| m.get(name)).map(|m| m.frozen.as_slice());
            let m = self.m.get_mut(name).expect("moment per parameter").data_mut();
            let v = self.v.get_mut(name).expect("moment per parameter").data_mut();
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                if frozen.is_some_and(|f| f[i]) {
                    continue;
                }
                m[i] = b1 * m[i] + (F::one() - b1) * gv;
                v[i] = b2 * v[i] + (F::one() - b2) * gv * gv;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
