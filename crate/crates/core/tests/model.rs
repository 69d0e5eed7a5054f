mod common;

use common::*;
use metastate_core::model::LayerState;
use metastate_core::params::{layer, layer_key};
use metastate_core::{InferenceState, Model, ModelConfig, Sampling, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn batch_equals_incremental_bitwise() {
    let m = Model::<f64>::init(&ModelConfig::tiny(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens = random_tokens(64, 258, &mut rng);
    let (batch, end) = m.forward(&tokens).unwrap();
    let mut state = InferenceState::zeros(&m.config);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = m.step(tok, &mut state).unwrap();
        assert_eq!(row.data(), batch.row(t), "position {t}");
    }
    assert_eq!(state, end);
}

#[test]
fn batch_equals_incremental_f32() {
    let m = Model::<f32>::init(&ModelConfig::tiny(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens = random_tokens(32, 258, &mut rng);
    let (batch, _) = m.forward(&tokens).unwrap();
    let mut state = InferenceState::zeros(&m.config);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = m.step(tok, &mut state).unwrap();
        for (a, b) in row.data().iter().zip(batch.row(t)) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }
}

#[test]
fn split_windows_continue_state() {
    let m = jittered(&ModelConfig::tiny(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens = random_tokens(20, 258, &mut rng);
    let (whole, _) = m.forward(&tokens).unwrap();
    let (first, mid) = m.forward(&tokens[..7]).unwrap();
    let (second, _) = m.forward_with_state(&tokens[7..], &mid).unwrap();
    assert_eq!(Tensor::concat_rows(&[&first, &second]).unwrap(), whole);
}

#[test]
fn tape_matches_reference_route() {
    let m = jittered(&ModelConfig::tiny(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tokens = random_tokens(12, 258, &mut rng);
    let (batch, _) = m.forward(&tokens).unwrap();
    let mut state = InferenceState::zeros(&m.config);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = m.reference_step(tok, &mut state).unwrap();
        let want = batch.slice(t, t + 1, 0, batch.cols()).unwrap();
        assert!(row.max_abs_diff(&want).unwrap() < 1e-10, "position {t}");
    }
}

#[test]
fn causality_under_suffix_perturbation() {
    let m = jittered(&ModelConfig::tiny(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tokens = random_tokens(24, 258, &mut rng);
    let (base, _) = m.forward(&tokens).unwrap();
    for cut in [1, 10, 23] {
        let mut other = tokens.clone();
        for t in other.iter_mut().skip(cut) {
            *t = (*t + 17) % 258;
        }
        let (pert, _) = m.forward(&other).unwrap();
        for t in 0..cut {
            assert_eq!(pert.row(t), base.row(t));
        }
    }
}

#[test]
fn state_bytes_independent_of_length() {
    let m = Model::<f32>::init(&ModelConfig::tiny(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sizes: Vec<_> = [64, 256, 1024]
        .iter()
        .map(|&n| m.forward(&random_tokens(n, 258, &mut rng)).unwrap().1.byte_size())
        .collect();
    assert!(sizes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn zeroed_meta_state_output_leaves_intermediate() {
    let mut m = jittered(&ModelConfig::tiny(), 11);
    let key = layer_key(0, layer::MS_W_O);
    let shape = m.params.get(&key).unwrap().shape();
    m.params.replace(&key, Tensor::zeros(shape.0, shape.1)).unwrap();
    m.params.replace(&layer_key(0, layer::MS_NORM_BETA), Tensor::zeros(1, 64)).unwrap();
    let x = Tensor::from_fn(1, 64, |_, c| (c as f64 * 0.37).sin());
    let state = LayerState::zeros(&m.config);
    let (out, _) = m.layer_forward(0, &x, &state).unwrap();
    // With W_o zero, the meta-state contribution is exactly zero.
    let tmp = metastate_core::time_mix::TimeMixParams::from_store(&m.params, &m.config, 0).unwrap();
    let ln1 = metastate_core::norm::layer_norm(
        &x,
        &metastate_core::norm::NormParams::new(
            m.params.get(&layer_key(0, layer::LN1_GAMMA)).unwrap().as_ref().clone(),
            m.params.get(&layer_key(0, layer::LN1_BETA)).unwrap().as_ref().clone(),
            m.config.norm_eps,
        )
        .unwrap(),
    )
    .unwrap();
    let heads: Vec<_> = (0..4).map(|h| state.wkv_head(h)).collect();
    let tm = metastate_core::time_mix::time_mix_forward(&ln1, &state.shift, &heads, &tmp).unwrap();
    assert_eq!(out, x.add(&tm.out).unwrap());
}

#[test]
fn end_to_end_gradients_match_differences() {
    let cfg = small_config();
    let m = jittered(&cfg, 12);
    let tokens = [3, 7, 1, 9];
    let (inputs, targets) = (&tokens[..3], &tokens[1..]);
    let (_, grads) = m.loss_and_grads(inputs, targets).unwrap();
    assert_eq!(grads.len(), m.params.len());
    for (name, analytic) in &grads {
        let numeric = numeric_grad(&m.params, name, 1e-5, |p| {
            Model::new(cfg.clone(), p.clone()).unwrap().loss(inputs, targets).unwrap()
        });
        let err = rel_err(analytic, &numeric);
        assert!(err < 1e-4, "{name}: rel err {err:e}");
    }
}

#[test]
fn generation_is_deterministic() {
    let m = Model::<f64>::init(&ModelConfig::tiny(), 13).unwrap();
    let a = m.generate(&[72, 105], 12, Sampling::Temperature(0.8), 5).unwrap();
    let b = m.generate(&[72, 105], 12, Sampling::Temperature(0.8), 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 14);
    let g1 = m.generate(&[72], 8, Sampling::Greedy, 1).unwrap();
    let g2 = m.generate(&[72], 8, Sampling::Greedy, 2).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn parameter_count_matches_registry() {
    let cfg = ModelConfig::tiny();
    let m = Model::<f64>::init(&cfg, 0).unwrap();
    assert_eq!(m.params.element_count(), cfg.param_count());
}
