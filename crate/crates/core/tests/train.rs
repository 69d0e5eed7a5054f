//! Loss, optimizer loop, evaluation and checkpoint behaviour.

use std::collections::BTreeMap;

use metastate_core::autodiff::Tape;
use metastate_core::checkpoint::{Checkpoint, Mask};
use metastate_core::config::BYTE_VOCAB;
use metastate_core::corpus::Corpus;
use metastate_core::params::HEAD;
use metastate_core::train::{evaluate, evaluate_checkpoint, train, MetricsRecord, TrainConfig, TrainIo};
use metastate_core::{DType, Error, Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn byte_config(precision: DType) -> ModelConfig {
    ModelConfig::new(BYTE_VOCAB, 8, 2, 1, precision).unwrap()
}

fn corpus() -> Corpus {
    let text = "the cat sat on the mat. the dog sat on the log. ".repeat(40);
    Corpus::from_bytes(text.as_bytes()).unwrap()
}

fn quick(steps: u64) -> TrainConfig {
    TrainConfig { lr: 1e-2, batch_size: 2, seq_len: 16, steps, seed: 3, eval_every: 2, eval_windows: 4, ..TrainConfig::desk() }
}

fn start(precision: DType, seed: u64) -> Checkpoint {
    let cfg = byte_config(precision);
    match precision {
        DType::F32 => Checkpoint::from_model(&Model::<f32>::init(&cfg, seed).unwrap()),
        DType::F64 => Checkpoint::from_model(&Model::<f64>::init(&cfg, seed).unwrap()),
    }
}

fn cross_entropy(logits: Tensor<f64>, targets: &[usize]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(logits);
    let l = tape.softmax_cross_entropy(x, targets).unwrap();
    tape.value(l).get(0, 0)
}

/// Mean of `log Σ exp(x) − x[target]` summed directly, without shifting.
fn naive_cross_entropy(logits: &Tensor<f64>, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        total += row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[t];
    }
    total / targets.len() as f64
}

#[test]
fn uniform_logits_cost_log_vocab() {
    let loss = cross_entropy(Tensor::zeros(3, 256), &[0, 17, 255]);
    assert!((loss - 256f64.ln()).abs() < 1e-12);
    assert!((loss - 5.545).abs() < 1e-3);
}

#[test]
fn confident_correct_logits_cost_nearly_nothing() {
    let mut logits = Tensor::zeros(2, 10);
    logits.set(0, 3, 20.0);
    logits.set(1, 7, 20.0);
    assert!(cross_entropy(logits, &[3, 7]) < 1e-4);
}

#[test]
fn cross_entropy_matches_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (t, v) = (rng.random_range(1..8), rng.random_range(2..40));
        let logits = Tensor::from_fn(t, v, |_, _| rng.random_range(-4.0..4.0));
        let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..v)).collect();
        let want = naive_cross_entropy(&logits, &targets);
        let got = cross_entropy(logits, &targets);
        assert!(((got - want) / want).abs() < 1e-10);
    }
}

#[test]
fn large_logits_stay_finite() {
    let logits = Tensor::from_f64(1, 3, &[1000.0, 999.0, -1000.0]).unwrap();
    let loss = cross_entropy(logits, &[1]);
    let want = 1.0 + (1.0 + (-1.0f64).exp()).ln();
    assert!((loss - want).abs() < 1e-12);
}

#[test]
fn training_is_deterministic() {
    let c = corpus();
    let a = train::<f64>(&start(DType::F64, 1), &c, &quick(6), TrainIo::default()).unwrap();
    let b = train::<f64>(&start(DType::F64, 1), &c, &quick(6), TrainIo::default()).unwrap();
    let bits = |o: &[MetricsRecord]| o.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.metrics), bits(&b.metrics));
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let c = corpus();
    let full = train::<f64>(&start(DType::F64, 4), &c, &quick(8), TrainIo::default()).unwrap();
    let half = train::<f64>(&start(DType::F64, 4), &c, &quick(4), TrainIo::default()).unwrap();
    let rest = train::<f64>(&half.checkpoint, &c, &quick(8), TrainIo::default()).unwrap();
    assert_eq!(rest.metrics.first().unwrap().step, 5);
    let losses: Vec<u64> = half.metrics.iter().chain(&rest.metrics).map(|r| r.loss.to_bits()).collect();
    assert_eq!(losses, full.metrics.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>());
    assert_eq!(rest.checkpoint.to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());
}

#[test]
fn training_reduces_validation_loss() {
    let c = corpus();
    let out = train::<f32>(&start(DType::F32, 5), &c, &quick(40), TrainIo::default()).unwrap();
    assert!(out.final_val_loss < out.initial_val_loss, "{} vs {}", out.final_val_loss, out.initial_val_loss);
    let trained = evaluate_checkpoint(&out.checkpoint, &c.valid, 16, 4).unwrap();
    assert_eq!(trained, out.final_val_loss);
    assert!(out.metrics.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn frozen_entries_survive_training_bitwise() {
    let c = corpus();
    let mut ckpt = start(DType::F64, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let masks: BTreeMap<String, Mask> = ckpt
        .params
        .iter()
        .map(|(name, t)| {
            let mut m = Mask::new(t.rows(), t.cols());
            m.frozen.iter_mut().for_each(|f| *f = rng.random_bool(0.5));
            (name.to_string(), m)
        })
        .collect();
    ckpt.masks = Some(masks.clone());
    let out = train::<f64>(&ckpt, &c, &quick(5), TrainIo::default()).unwrap();
    let mut moved = 0;
    for (name, mask) in &masks {
        let (old, new) = (ckpt.params.get(name).unwrap(), out.checkpoint.params.get(name).unwrap());
        for (i, &frozen) in mask.frozen.iter().enumerate() {
            if frozen {
                assert_eq!(old.data()[i].to_bits(), new.data()[i].to_bits(), "{name}[{i}]");
            } else if old.data()[i] != new.data()[i] {
                moved += 1;
            }
        }
    }
    assert!(moved > 0);
    assert_eq!(out.checkpoint.masks.as_ref(), Some(&masks));
}

#[test]
fn non_finite_parameters_abort_training() {
    let mut ckpt = start(DType::F64, 7);
    ckpt.params.get_mut(HEAD).unwrap().data_mut()[0] = f64::NAN;
    let err = train::<f64>(&ckpt, &corpus(), &quick(3), TrainIo::default()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn metrics_log_is_json_lines() {
    let mut log = Vec::new();
    let cfg = quick(4);
    train::<f64>(&start(DType::F64, 8), &corpus(), &cfg, TrainIo { metrics: Some(&mut log), checkpoint: None }).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for (i, line) in lines.iter().enumerate() {
        let keys: Vec<&str> = line.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["step", "loss", "val_loss", "lr", "elapsed"] {
            assert!(keys.contains(&k), "missing {k}");
        }
        assert_eq!(line["step"], i as u64 + 1);
        assert_eq!(line["val_loss"].is_null(), (i + 1) % 2 != 0);
    }
}

#[test]
fn checkpoint_written_by_training_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let out = train::<f64>(&start(DType::F64, 9), &corpus(), &quick(3), TrainIo { metrics: None, checkpoint: Some(&path) }).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    assert_eq!(loaded.moments.as_ref().unwrap().step, 3);
}

#[test]
fn precision_mismatch_is_rejected() {
    let err = train::<f32>(&start(DType::F64, 10), &corpus(), &quick(2), TrainIo::default()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let c = corpus();
    let model = Model::<f64>::init(&byte_config(DType::F64), 11).unwrap();
    let before = model.params.clone();
    let a = evaluate(&model, &c.valid, 16, 8).unwrap();
    let b = evaluate(&model, &c.valid, 16, 8).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(model.params, before);
}

#[test]
fn silent_head_scores_log_vocab() {
    let cfg = byte_config(DType::F64);
    let mut model = Model::<f64>::init(&cfg, 12).unwrap();
    let head = model.params.get_mut(HEAD).unwrap();
    head.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let loss = evaluate(&model, &corpus().valid, 16, 8).unwrap();
    assert!((loss - (BYTE_VOCAB as f64).ln()).abs() < 1e-12);
}

#[test]
fn file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut ckpt = train::<f32>(&start(DType::F32, 13), &corpus(), &quick(2), TrainIo::default()).unwrap().checkpoint;
    let masks = ckpt.params.iter().map(|(n, t)| (n.to_string(), Mask::new(t.rows(), t.cols()))).collect();
    ckpt.masks = Some(masks);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded, ckpt);
}
