//! The invariant suite run by the `check` command.
//!
//! Every check returns a named pass/fail result with a short measurement.
//! Recurrence, gradient, stability, scaling and checkpoint checks always run
//! in 64-bit. The equivalence and causality checks run in the precision of
//! the configuration under test.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Op;
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::graph::Graph;
use crate::kernels::softmax_rows;
use crate::meta_state::{self, meta_state_step};
use crate::model::{InferenceState, Model};
use crate::optim::{clip_global_norm, mask_grads, Adam, AdamConfig};
use crate::params::{self, layer, layer_key};
use crate::scaling::{scale_checkpoint, verify_function_preservation, ScalePlan};
use crate::tensor::{DType, Real, Tensor};
use crate::time_mix::{self, transition_matrix, wkv_step, TransitionTerms};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let tag = if r.pass { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {:<28} {:>8.2}s  {}", r.name, r.seconds, r.detail)?;
        }
        let passed = self.results.iter().filter(|r| r.pass).count();
        write!(f, "{passed}/{} checks passed", self.results.len())
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult { name: name.to_string(), pass, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Largest singular value of `m` by power iteration on `mᵀm`.
pub fn spectral_norm(m: &Tensor<f64>, iters: usize) -> f64 {
    let n = m.cols();
    let mtm = m.transpose().matmul(m).expect("square product");
    let mut v = Tensor::from_fn(1, n, |_, c| 1.0 + 0.1 * c as f64);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = v.matmul(&mtm).expect("conforming");
        let norm = w.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm / v.frobenius_norm();
        v = w.scale(1.0 / norm);
    }
    lambda.sqrt()
}

/// `Σᵢ uᵢᵀ uᵢ' ∏_{j>i} Tⱼ`, the closed form of `S_t = S_{t-1} T_t + uᵀu'`
/// started from zero.
pub fn unrolled_state(terms: &[TransitionTerms<f64>], left: &[Tensor<f64>], right: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let n = terms[0].dim();
    let mut total = Tensor::zeros(n, n);
    for i in 0..terms.len() {
        let mut term = Tensor::outer(&left[i], &right[i])?;
        for t in &terms[i + 1..] {
            term = term.matmul(&transition_matrix(t))?;
        }
        total = total.add(&term)?;
    }
    Ok(total)
}

fn relative(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        0.0
    } else {
        a.sub(b).expect("same shape").frobenius_norm() / scale
    }
}

fn random_row(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0))
}

fn random_tokens(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Largest relative error between stepwise WKV and meta-state rollouts and
/// their closed forms over `trials` random sequences of length `t_len`.
pub fn recurrence_error(n: usize, t_len: usize, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let terms: Vec<_> = (0..t_len).map(|_| TransitionTerms::<f64>::sample(n, &mut rng)).collect();
        let zs: Vec<_> = (0..t_len).map(|_| random_row(n, &mut rng).relu()).collect();
        let mut wkv = Tensor::zeros(n, n);
        let mut ms = Tensor::zeros(n, n);
        for (t, z) in terms.iter().zip(&zs) {
            wkv = wkv_step(&wkv, t)?;
            ms = meta_state_step(&ms, t, z)?;
        }
        let values: Vec<_> = terms.iter().map(|t| t.value.clone()).collect();
        let keys: Vec<_> = terms.iter().map(|t| t.key.clone()).collect();
        worst = worst.max(relative(&wkv, &unrolled_state(&terms, &values, &keys)?));
        worst = worst.max(relative(&ms, &unrolled_state(&terms, &zs, &zs)?));
    }
    Ok(worst)
}

/// Largest spectral norm over `draws` constrained transition matrices.
pub fn worst_transition_norm(n: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws)
        .map(|_| spectral_norm(&transition_matrix(&TransitionTerms::<f64>::sample(n, &mut rng)), 500))
        .fold(0.0, f64::max)
}

/// One layer, width 8, two heads, vocabulary 11.
pub fn gradient_config() -> ModelConfig {
    ModelConfig::new(11, 8, 2, 1, DType::F64).expect("valid config")
}

/// Worst per-tensor relative error between tape gradients and central
/// differences with step `h`, with the tensor it occurred in.
pub fn gradient_error(model: &Model<f64>, inputs: &[usize], targets: &[usize], h: f64) -> Result<(f64, String)> {
    let (_, grads) = model.loss_and_grads(inputs, targets)?;
    let mut work = model.clone();
    let mut worst = (0.0f64, String::new());
    for (name, analytic) in &grads {
        let mut numeric = Tensor::zeros(analytic.rows(), analytic.cols());
        for i in 0..analytic.len() {
            let orig = work.params.get(name)?.data()[i];
            work.params.get_mut(name)?.data_mut()[i] = orig + h;
            let up = work.loss(inputs, targets)?;
            work.params.get_mut(name)?.data_mut()[i] = orig - h;
            let down = work.loss(inputs, targets)?;
            work.params.get_mut(name)?.data_mut()[i] = orig;
            numeric.data_mut()[i] = (up - down) / (2.0 * h);
        }
        let e = relative(analytic, &numeric);
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    Ok(worst)
}

/// Moves every vector parameter off its initial constant.
pub fn perturb_vectors(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let t = model.params.get_mut(&name).expect("listed name");
        if t.rows() != 1 {
            continue;
        }
        let mu = name.ends_with(layer::TM_MU);
        for v in t.data_mut() {
            *v = if mu { rng.random_range(0.2..0.8) } else { *v + rng.random_range(-0.3..0.3) };
        }
    }
}

/// Largest deviation between batch logits and token-by-token logits,
/// relative to `max(|batch|, 1)`, and whether the final states are equal.
pub fn incremental_deviation<F: Real>(model: &Model<F>, tokens: &[usize]) -> Result<(f64, bool)> {
    let (batch, end) = model.forward(tokens)?;
    let mut state = InferenceState::zeros(&model.config);
    let mut worst = 0.0f64;
    for (t, &tok) in tokens.iter().enumerate() {
        let row = model.step(tok, &mut state)?;
        for (a, b) in row.data().iter().zip(batch.row(t)) {
            worst = worst.max((a.as_f64() - b.as_f64()).abs() / b.as_f64().abs().max(1.0));
        }
    }
    Ok((worst, state == end))
}

/// Number of trials in which changing a suffix altered an earlier logit.
pub fn causality_violations<F: Real>(model: &Model<F>, len: usize, trials: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config.vocab_size;
    let mut bad = 0;
    for _ in 0..trials {
        let a = random_tokens(len, vocab, &mut rng);
        let cut = rng.random_range(1..len);
        let mut b = a.clone();
        for tok in &mut b[cut..] {
            *tok = (*tok + 1 + rng.random_range(0..vocab - 1)) % vocab;
        }
        let (la, _) = model.forward(&a)?;
        let (lb, _) = model.forward(&b)?;
        if la.slice(0, cut, 0, vocab)? != lb.slice(0, cut, 0, vocab)? {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Parameters bound and op kinds recorded by the meta-state layer of layer
/// `l`, read off a freshly recorded window.
pub fn meta_state_tape_audit<F: Real>(model: &Model<F>, l: usize) -> Result<(Vec<String>, Vec<&'static str>)> {
    let cfg = &model.config;
    let mut g = Graph::new(&model.params);
    let x = g.input(Tensor::zeros(4, cfg.d_model));
    let prev = g.input(Tensor::zeros(1, cfg.d_model));
    let init = g.input(Tensor::zeros(cfg.d_model, cfg.head_dim()));
    let tm = time_mix::record(&mut g, cfg, l, x, prev, init)?;
    let start = g.tape.len();
    let ms_init = g.input(Tensor::zeros(cfg.d_model, cfg.head_dim()));
    meta_state::record(&mut g, cfg, l, x, &tm, ms_init)?;
    let mut bound = Vec::new();
    let mut ops = Vec::new();
    for op in g.tape.ops().skip(start) {
        if let Op::Param(name) = op {
            bound.push(name.clone());
        }
        ops.push(op.name());
    }
    bound.sort();
    Ok((bound, ops))
}

/// Width `D + D/2` rounded up to a multiple of the head count.
pub fn growth_target(cfg: &ModelConfig) -> usize {
    let want = cfg.d_model + cfg.d_model.div_ceil(2);
    want.div_ceil(cfg.n_heads) * cfg.n_heads
}

fn checks_f64(cfg: &ModelConfig, seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let n = cfg.head_dim().min(8);
    out.push(timed("recurrence-closed-form", || {
        let e = recurrence_error(n, 16, 10, seed)?;
        Ok((e < 1e-10, format!("max rel err {e:.3e} (< 1e-10), T=16, n={n}")))
    }));
    out.push(timed("transition-stability", || {
        let s = worst_transition_norm(cfg.head_dim(), 1000, seed);
        Ok((s <= 1.0 + 1e-6, format!("max spectral norm {s:.9} over 1000 draws")))
    }));
    out.push(timed("gradient-soundness", || {
        let mut m = Model::<f64>::init(&gradient_config(), seed)?;
        perturb_vectors(&mut m, seed);
        let (e, name) = gradient_error(&m, &[1, 5, 9], &[5, 9, 2], 1e-5)?;
        Ok((e < 1e-4, format!("max rel err {e:.3e} (< 1e-4) in {name}")))
    }));
    out.push(timed("cross-entropy-uniform", || {
        let store = params::ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Tensor::zeros(3, 256));
        let loss = g.tape.softmax_cross_entropy(logits, &[0, 17, 255])?;
        let v = g.value(loss).get(0, 0);
        let e = (v - 256f64.ln()).abs();
        Ok((e < 1e-12, format!("loss {v:.12}, |loss - ln 256| = {e:.1e}")))
    }));
    out.push(timed("function-preserving-scaling", || {
        let mut src = cfg.clone();
        src.precision = DType::F64;
        let old = Model::<f64>::init(&src, seed)?;
        let plan = ScalePlan::new(&src, growth_target(&src), src.n_heads)?;
        let grown = scale_checkpoint(&Checkpoint::from_model(&old), &plan, seed)?;
        let new = grown.to_model::<f64>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<_> = (0..10).map(|_| random_tokens(32, src.vocab_size, &mut rng)).collect();
        let r = verify_function_preservation(&old, &new, &seqs)?;
        let counted = new.params.element_count() == plan.target.param_count();
        Ok((
            r.pass && counted,
            format!("D {} -> {}: max |dlogit| {:.3e} (<= 1e-6), count audit {counted}", src.d_model, plan.target.d_model, r.max_abs_deviation),
        ))
    }));
    out.push(timed("freeze-masks", || {
        let src = gradient_config();
        let old = Model::<f64>::init(&src, seed)?;
        let plan = ScalePlan::new(&src, growth_target(&src), src.n_heads)?;
        let grown = scale_checkpoint(&Checkpoint::from_model(&old), &plan, seed)?;
        let masks = grown.masks.clone().unwrap_or_default();
        let mut m = grown.to_model::<f64>()?;
        let before = m.params.clone();
        let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &m.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let w = random_tokens(9, src.vocab_size, &mut rng);
            let (_, mut g) = m.loss_and_grads(&w[..8], &w[1..])?;
            mask_grads(&mut g, &masks);
            clip_global_norm(&mut g, 1.0);
            adam.update(&mut m.params, &g, Some(&masks))?;
        }
        let mut frozen = 0;
        let mut changed_frozen = 0;
        let mut changed_free = 0;
        for (name, t) in m.params.iter() {
            let b = before.get(name)?;
            let mask = masks.get(name);
            for (i, (x, y)) in t.data().iter().zip(b.data()).enumerate() {
                let is_frozen = mask.is_some_and(|mk| mk.frozen[i]);
                frozen += is_frozen as usize;
                if x.to_bits() != y.to_bits() {
                    if is_frozen {
                        changed_frozen += 1;
                    } else {
                        changed_free += 1;
                    }
                }
            }
        }
        Ok((
            changed_frozen == 0 && frozen > 0 && changed_free > 0,
            format!("{frozen} frozen entries, {changed_frozen} changed; {changed_free} free entries moved"),
        ))
    }));
    out.push(timed("checkpoint-round-trip", || {
        let src = gradient_config();
        let grown = scale_checkpoint(
            &Checkpoint::from_model(&Model::<f64>::init(&src, seed)?),
            &ScalePlan::new(&src, growth_target(&src), src.n_heads)?,
            seed,
        )?;
        let mut m = grown.to_model::<f64>()?;
        let mut adam = Adam::new(AdamConfig::default(), &m.params);
        let (_, g) = m.loss_and_grads(&[1, 2, 3], &[2, 3, 4])?;
        adam.update(&mut m.params, &g, grown.masks.as_ref())?;
        let mut ckpt = Checkpoint::from_model(&m);
        ckpt.moments = Some(adam.moments());
        ckpt.masks = grown.masks.clone();
        let first = ckpt.to_bytes()?;
        let back = Checkpoint::from_bytes(&first)?;
        let second = back.to_bytes()?;
        Ok((first == second && back == ckpt, format!("{} bytes, identical {}", first.len(), first == second)))
    }));
    out.push(timed("clipping", || {
        let m = Model::<f64>::init(&gradient_config(), seed)?;
        let (_, mut g) = m.loss_and_grads(&[1, 2, 3, 4], &[2, 3, 4, 5])?;
        for t in g.values_mut() {
            *t = t.scale(1e3);
        }
        let before = clip_global_norm(&mut g, 1.0);
        let after = crate::optim::global_norm(&g);
        Ok((after <= 1.0 + 1e-9, format!("norm {before:.3e} -> {after:.12}")))
    }));
    out
}

fn checks_generic<F: Real>(cfg: &ModelConfig, seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let model = Model::<F>::init(cfg, seed);
    let Ok(model) = model else {
        let err = model.err().map(|e| e.to_string()).unwrap_or_default();
        return vec![CheckResult { name: "init".into(), pass: false, detail: err, seconds: 0.0 }];
    };
    out.push(timed("parameter-count", || {
        let (got, want) = (model.params.element_count(), cfg.param_count());
        Ok((got == want, format!("{got} stored, {want} closed form")))
    }));
    out.push(timed("incremental-equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = random_tokens(64, cfg.vocab_size, &mut rng);
        let (dev, same_state) = incremental_deviation(&model, &tokens)?;
        let (ok, bound) = match F::DTYPE {
            DType::F64 => (dev == 0.0 && same_state, "bitwise"),
            DType::F32 => (dev <= 1e-6, "<= 1e-6"),
        };
        Ok((ok, format!("T=64 max deviation {dev:.3e} ({bound})")))
    }));
    out.push(timed("causality", || {
        let bad = causality_violations(&model, 24, 10, seed)?;
        Ok((bad == 0, format!("{bad}/10 trials changed an earlier logit")))
    }));
    out.push(timed("constant-state-size", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes: Vec<usize> = [64, 256, 1024]
            .iter()
            .map(|&t| Ok(model.forward(&random_tokens(t, cfg.vocab_size, &mut rng))?.1.byte_size()))
            .collect::<Result<_>>()?;
        Ok((sizes.windows(2).all(|w| w[0] == w[1]), format!("bytes at T=64,256,1024: {sizes:?}")))
    }));
    out.push(timed("meta-state-audit", || {
        let mut ok = true;
        let mut softmax = 0;
        for l in 0..cfg.n_layers {
            let (bound, ops) = meta_state_tape_audit(&model, l)?;
            let mut want: Vec<String> = layer::META_STATE.iter().map(|s| layer_key(l, s)).collect();
            if cfg.is_grown() {
                want.push(layer_key(l, layer::SCALE_W_IN));
            }
            want.sort();
            ok &= bound == want;
            softmax += ops.iter().filter(|o| o.contains("softmax")).count();
        }
        Ok((ok && softmax == 0, format!("trainable set matches: {ok}; softmax nodes: {softmax}")))
    }));
    out.push(timed("softmax-rows", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<F>::from_fn(4, 9, |_, _| F::of(rng.random_range(-5.0..5.0)));
        let p = softmax_rows(&x);
        let worst = (0..4).map(|r| (p.row(r).iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        Ok((worst <= 1e-6, format!("max |row sum - 1| {worst:.2e}")))
    }));
    out
}

/// Runs every check for `cfg`.
pub fn run_suite(cfg: &ModelConfig, seed: u64) -> CheckReport {
    let mut results = match cfg.precision {
        DType::F32 => checks_generic::<f32>(cfg, seed),
        DType::F64 => checks_generic::<f64>(cfg, seed),
    };
    results.extend(checks_f64(cfg, seed));
    CheckReport { results }
}
