//! Named parameter registry.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const EMBEDDING: &str = "embedding";
pub const HEAD: &str = "head";
pub const LN_OUT_GAMMA: &str = "ln_out.gamma";
pub const LN_OUT_BETA: &str = "ln_out.beta";

/// Per-layer tensor suffixes.
pub mod layer {
    pub const LN1_GAMMA: &str = "ln1.gamma";
    pub const LN1_BETA: &str = "ln1.beta";
    pub const TM_MU: &str = "tm.mu";
    pub const TM_W_R: &str = "tm.w_r";
    pub const TM_W_K: &str = "tm.w_k";
    pub const TM_W_V: &str = "tm.w_v";
    pub const TM_W_DECAY: &str = "tm.w_decay";
    pub const TM_B_DECAY: &str = "tm.b_decay";
    pub const TM_W_KAPPA: &str = "tm.w_kappa";
    pub const TM_W_RATE: &str = "tm.w_rate";
    pub const TM_B_RATE: &str = "tm.b_rate";
    pub const TM_NORM_GAMMA: &str = "tm.norm.gamma";
    pub const TM_NORM_BETA: &str = "tm.norm.beta";
    pub const TM_W_O: &str = "tm.w_o";
    pub const LN2_GAMMA: &str = "ln2.gamma";
    pub const LN2_BETA: &str = "ln2.beta";
    pub const MS_W_O: &str = "ms.w_o";
    pub const MS_NORM_GAMMA: &str = "ms.norm.gamma";
    pub const MS_NORM_BETA: &str = "ms.norm.beta";
    /// Input projection of the self-state encoder; only present in grown models.
    pub const SCALE_W_IN: &str = "scale.w_in";

    /// Tensors owned by the meta-state layer proper.
    pub const META_STATE: &[&str] = &[MS_W_O, MS_NORM_GAMMA, MS_NORM_BETA];

    pub const D_BY_D: &[&str] = &[TM_W_R, TM_W_K, TM_W_V, TM_W_DECAY, TM_W_KAPPA, TM_W_RATE, TM_W_O];
    pub const GAINS: &[&str] = &[LN1_GAMMA, TM_NORM_GAMMA, LN2_GAMMA, MS_NORM_GAMMA];
    pub const OFFSETS: &[&str] = &[LN1_BETA, TM_NORM_BETA, LN2_BETA, MS_NORM_BETA, TM_MU, TM_B_DECAY, TM_B_RATE];
}

pub fn layer_key(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

/// Splits `layers.{i}.{suffix}` into `(i, suffix)`.
pub fn parse_layer_key(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layers.")?;
    let (idx, suffix) = rest.split_once('.')?;
    Some((idx.parse().ok()?, suffix))
}

/// All trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Arc<Tensor<F>>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name:?} registered twice")));
        }
        self.tensors.insert(name, Arc::new(tensor));
        Ok(())
    }

    pub fn replace(&mut self, name: &str, tensor: Tensor<F>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape("replace", slot.shape(), tensor.shape()));
        }
        *slot = Arc::new(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<F>>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Mutable access; clones the tensor if it is shared with a live tape.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast::<G>()))).collect(),
        }
    }
}

/// Name and shape of every tensor a model with `config` registers.
pub fn expected_shapes(config: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
    let d = config.d_model;
    let v = config.vocab_size;
    let n = config.head_dim();
    let mut out = BTreeMap::new();
    out.insert(EMBEDDING.to_string(), (v, d));
    out.insert(HEAD.to_string(), (d, v));
    out.insert(LN_OUT_GAMMA.to_string(), (1, d));
    out.insert(LN_OUT_BETA.to_string(), (1, d));
    for l in 0..config.n_layers {
        for s in layer::GAINS.iter().chain(layer::OFFSETS) {
            out.insert(layer_key(l, s), (1, d));
        }
        for s in layer::D_BY_D {
            out.insert(layer_key(l, s), (d, d));
        }
        out.insert(layer_key(l, layer::MS_W_O), (config.n_heads * n, d));
        if let Some(o) = config.origin_head_dim {
            out.insert(layer_key(l, layer::SCALE_W_IN), (config.n_heads * o, n));
        }
    }
    out
}

/// Fails unless `store` holds exactly the tensors `config` expects.
pub fn check_store<F: Real>(config: &ModelConfig, store: &ParamStore<F>) -> Result<()> {
    let want = expected_shapes(config);
    for (name, t) in store.iter() {
        match want.get(name) {
            None => return Err(Error::Contract(format!("unexpected parameter {name:?}"))),
            Some(&s) if s != t.shape() => return Err(Error::shape("parameter", s, t.shape())),
            _ => {}
        }
    }
    if let Some(missing) = want.keys().find(|k| !store.contains(k)) {
        return Err(Error::Contract(format!("missing parameter {missing:?}")));
    }
    Ok(())
}

/// Uniform bound `sqrt(1 / fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// Deterministic initialization.
///
/// Projections draw from `uniform(−a, a)` with `a = sqrt(1 / fan_in)`; the
/// fan-in of a meta-state output block is the head width since each head
/// projects from `D/h` values. Norm gains start at 1, offsets and the
/// decay/rate biases at 0, and the token-shift mix at 0.5.
pub fn init_params<F: Real>(config: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let v = config.vocab_size;
    let n = config.head_dim();
    let mut store = ParamStore::new();
    store.insert(EMBEDDING, Tensor::uniform(v, d, init_bound(d), &mut rng))?;
    for l in 0..config.n_layers {
        use layer::*;
        let key = |s: &str| layer_key(l, s);
        for g in GAINS {
            store.insert(key(g), Tensor::full(1, d, F::one()))?;
        }
        for b in [LN1_BETA, TM_NORM_BETA, LN2_BETA, MS_NORM_BETA, TM_B_DECAY, TM_B_RATE] {
            store.insert(key(b), Tensor::zeros(1, d))?;
        }
        store.insert(key(TM_MU), Tensor::full(1, d, F::of(0.5)))?;
        for w in D_BY_D {
            store.insert(key(w), Tensor::uniform(d, d, init_bound(d), &mut rng))?;
        }
        store.insert(key(MS_W_O), Tensor::uniform(config.n_heads * n, d, init_bound(n), &mut rng))?;
        if let Some(o) = config.origin_head_dim {
            let mut w_in = Tensor::zeros(config.n_heads * o, n);
            for h in 0..config.n_heads {
                for i in 0..o {
                    w_in.set(h * o + i, i, F::one());
                }
            }
            store.insert(key(SCALE_W_IN), w_in)?;
        }
    }
    store.insert(LN_OUT_GAMMA, Tensor::full(1, d, F::one()))?;
    store.insert(LN_OUT_BETA, Tensor::zeros(1, d))?;
    store.insert(HEAD, Tensor::uniform(d, v, init_bound(d), &mut rng))?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = init_params::<f64>(&cfg, 3).unwrap();
        let b = init_params::<f64>(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f64>(&cfg, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gains_start_at_one() {
        let cfg = ModelConfig::tiny();
        let store = init_params::<f64>(&cfg, 0).unwrap();
        let gains: Vec<_> = store.iter().filter(|(k, _)| k.ends_with("gamma")).collect();
        assert_eq!(gains.len(), 4 * cfg.n_layers + 1);
        for (_, g) in gains {
            assert!(g.data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn head_width_16_bounds_output_blocks_by_quarter() {
        // tiny: D/h = 16, so meta-state output blocks draw from (-0.25, 0.25)
        let cfg = ModelConfig::tiny();
        assert_eq!(init_bound(16), 0.25);
        for seed in 0..5 {
            let store = init_params::<f64>(&cfg, seed).unwrap();
            for l in 0..cfg.n_layers {
                let w = store.get(&layer_key(l, layer::MS_W_O)).unwrap();
                assert!(w.max_abs() <= 0.25);
            }
        }
    }

    #[test]
    fn count_matches_closed_form() {
        for (name, ..) in crate::config::PRESETS.iter().take(2) {
            let cfg = ModelConfig::preset(name, DType::F32).unwrap();
            let store = init_params::<f32>(&cfg, 0).unwrap();
            assert_eq!(store.element_count(), cfg.param_count());
        }
    }

    #[test]
    fn init_matches_expected_shapes() {
        let mut cfg = ModelConfig::tiny();
        check_store(&cfg, &init_params::<f64>(&cfg, 0).unwrap()).unwrap();
        cfg.d_model = 96;
        cfg.origin_head_dim = Some(16);
        check_store(&cfg, &init_params::<f64>(&cfg, 0).unwrap()).unwrap();
        assert!(check_store(&ModelConfig::tiny(), &init_params::<f64>(&cfg, 0).unwrap()).is_err());
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::zeros(1, 1)).unwrap();
        assert!(s.insert("a", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn layer_key_round_trip() {
        assert_eq!(parse_layer_key(&layer_key(3, layer::TM_W_R)), Some((3, layer::TM_W_R)));
        assert_eq!(parse_layer_key("embedding"), None);
    }
}
