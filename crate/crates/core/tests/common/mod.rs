//! Helpers shared by the integration tests.
#![allow(dead_code)]

use metastate_core::params::ParamStore;
use metastate_core::{DType, Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One layer, width 8, two heads, eleven symbols.
pub fn small_config() -> ModelConfig {
    ModelConfig::new(11, 8, 2, 1, DType::F64).unwrap()
}

/// A model whose gains, offsets and biases are moved away from their
/// initial constants so that every gradient path is exercised.
pub fn jittered(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = m.params.names().map(str::to_string).collect();
    for name in names {
        let t = m.params.get_mut(&name).unwrap();
        let vector = t.rows() == 1;
        for v in t.data_mut() {
            if name.ends_with("tm.mu") {
                *v = rng.random_range(0.2..0.8);
            } else if vector {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

pub fn random_tokens(n: usize, vocab: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Central differences of `f` with respect to every entry of `name`.
pub fn numeric_grad(params: &ParamStore<f64>, name: &str, h: f64, f: impl Fn(&ParamStore<f64>) -> f64) -> Tensor<f64> {
    let base = params.get(name).unwrap().as_ref().clone();
    let mut out = Tensor::zeros(base.rows(), base.cols());
    let mut work = params.clone();
    for i in 0..base.len() {
        let orig = base.data()[i];
        work.get_mut(name).unwrap().data_mut()[i] = orig + h;
        let up = f(&work);
        work.get_mut(name).unwrap().data_mut()[i] = orig - h;
        let down = f(&work);
        work.get_mut(name).unwrap().data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a.sub(b).unwrap().frobenius_norm();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
