//! Time-mixing recurrence against hand-written oracles.

mod common;

use metastate_core::norm::NormLayout;
use metastate_core::time_mix::{
    constrain_decay, normalize_key, time_mix_forward, token_shift, transition_matrix, wkv_step, TimeMixParams, TransitionTerms,
};
use metastate_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rows(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0))
}

/// `diag(w) − κᵀ(a ⊙ κ)` entry by entry.
fn transition_oracle(w: &[f64], k: &[f64], a: &[f64]) -> Vec<Vec<f64>> {
    let n = w.len();
    (0..n).map(|i| (0..n).map(|j| if i == j { w[i] } else { 0.0 } - k[i] * a[j] * k[j]).collect()).collect()
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    (0..m).map(|i| (0..n).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect()).collect()
}

fn to_nested(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// `Σᵢ vᵢᵀkᵢ ∏_{j>i} Tⱼ` with plain nested loops.
fn unrolled(terms: &[TransitionTerms<f64>], left: impl Fn(usize) -> Vec<f64>, right: impl Fn(usize) -> Vec<f64>) -> Vec<Vec<f64>> {
    let n = terms[0].dim();
    let mut total = vec![vec![0.0; n]; n];
    for i in 0..terms.len() {
        let (u, v) = (left(i), right(i));
        let mut term: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| u[r] * v[c]).collect()).collect();
        for t in &terms[i + 1..] {
            term = mat_mul(&term, &transition_oracle(t.decay.data(), t.kappa.data(), t.rate.data()));
        }
        for r in 0..n {
            for c in 0..n {
                total[r][c] += term[r][c];
            }
        }
    }
    total
}

fn nested_rel_err(a: &Tensor<f64>, b: &[Vec<f64>]) -> f64 {
    let mut diff = 0.0;
    let mut scale = 0.0f64;
    let mut sb = 0.0;
    for (r, row) in b.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            diff += (a.get(r, c) - v).powi(2);
            sb += v * v;
        }
    }
    scale = scale.max(a.frobenius_norm()).max(sb.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Largest singular value by power iteration on `TᵀT`.
fn power_norm(t: &[Vec<f64>]) -> f64 {
    let n = t.len();
    let tt: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (0..n).map(|l| t[l][i] * t[l][j]).sum()).collect()).collect();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| tt[i][j] * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / norm).collect();
    }
    lambda.sqrt()
}

#[test]
fn token_shift_interpolates() {
    let x = Tensor::row_vector(vec![1.0, -2.0, 3.0]);
    let prev = Tensor::row_vector(vec![4.0, 5.0, 6.0]);
    assert_eq!(token_shift(&x, &prev, &Tensor::full(1, 3, 1.0)).unwrap(), x);
    assert_eq!(token_shift(&x, &prev, &Tensor::zeros(1, 3)).unwrap(), prev);
    let half = token_shift(&Tensor::row_vector(vec![2.0]), &Tensor::row_vector(vec![4.0]), &Tensor::row_vector(vec![0.5])).unwrap();
    assert_eq!(half.data(), &[3.0]);
}

#[test]
fn constraint_maps() {
    let w = constrain_decay(&Tensor::<f64>::zeros(1, 4));
    assert!(w.data().iter().all(|&v| (v - (-1f64).exp()).abs() < 1e-15));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let raw = Tensor::<f64>::from_fn(1, 5, |_, _| rng.random_range(-3.0..3.0));
        assert!((normalize_key(&raw).frobenius_norm() - 1.0).abs() < 1e-6);
    }
    let t = TransitionTerms::<f64>::from_raw(
        &Tensor::zeros(1, 3),
        &Tensor::row_vector(vec![1.0, 2.0, 2.0]),
        &Tensor::zeros(1, 3),
        Tensor::zeros(1, 3),
        Tensor::zeros(1, 3),
        Tensor::zeros(1, 3),
    );
    assert!(t.rate.data().iter().all(|&a| a == 0.5));
    t.validate().unwrap();
}

#[test]
fn wkv_three_steps_seed_11() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let terms: Vec<_> = (0..3).map(|_| TransitionTerms::<f64>::sample(4, &mut rng)).collect();
    let mut s = Tensor::zeros(4, 4);
    for t in &terms {
        s = wkv_step(&s, t).unwrap();
    }
    let want = unrolled(&terms, |i| terms[i].value.data().to_vec(), |i| terms[i].key.data().to_vec());
    assert!(nested_rel_err(&s, &want) < 1e-12);
}

#[test]
fn wkv_closed_form_up_to_sixteen_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for steps in 1..=16 {
        for n in [1, 2, 4, 8] {
            let terms: Vec<_> = (0..steps).map(|_| TransitionTerms::<f64>::sample(n, &mut rng)).collect();
            let mut s = Tensor::zeros(n, n);
            for t in &terms {
                s = wkv_step(&s, t).unwrap();
            }
            let want = unrolled(&terms, |i| terms[i].value.data().to_vec(), |i| terms[i].key.data().to_vec());
            let e = nested_rel_err(&s, &want);
            assert!(e < 1e-10, "T={steps} n={n}: {e:e}");
        }
    }
}

#[test]
fn wkv_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = TransitionTerms::<f64>::sample(2, &mut rng);
    t.value = Tensor::row_vector(vec![1.0, 0.0]);
    t.key = Tensor::row_vector(vec![0.0, 1.0]);
    assert_eq!(wkv_step(&Tensor::zeros(2, 2), &t).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    t.value = Tensor::zeros(1, 2);
    let prev = Tensor::from_f64(2, 2, &[0.3, -0.2, 0.5, 1.0]).unwrap();
    assert_eq!(wkv_step(&prev, &t).unwrap(), prev.matmul(&transition_matrix(&t)).unwrap());
}

#[test]
fn transition_matrix_matches_entrywise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let t = TransitionTerms::<f64>::sample(5, &mut rng);
        let got = transition_matrix(&t);
        let want = transition_oracle(t.decay.data(), t.kappa.data(), t.rate.data());
        assert!(nested_rel_err(&got, &want) < 1e-15);
    }
}

#[test]
fn vanishing_rate_gives_decay_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = TransitionTerms::<f64>::sample(4, &mut rng);
    t.rate = Tensor::full(1, 4, 1e-9);
    let m = transition_matrix(&t);
    for i in 0..4 {
        for j in 0..4 {
            let d = if i == j { t.decay.get(0, i) } else { 0.0 };
            assert!((m.get(i, j) - d).abs() < 1e-8);
        }
    }
}

#[test]
fn unit_gates_give_projection_complement() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut t = TransitionTerms::<f64>::sample(4, &mut rng);
    t.decay = Tensor::full(1, 4, 1.0);
    t.rate = Tensor::full(1, 4, 1.0);
    let m = transition_matrix(&t);
    let proj = m.matmul(&t.kappa.transpose()).unwrap();
    assert!(proj.max_abs() < 1e-12);
}

#[test]
fn constrained_draws_are_contractive() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = 1 + i % 8;
        let t = TransitionTerms::<f64>::sample(n, &mut rng);
        t.validate().unwrap();
        worst = worst.max(power_norm(&transition_oracle(t.decay.data(), t.kappa.data(), t.rate.data())));
    }
    assert!(worst <= 1.0 + 1e-6, "largest spectral norm {worst}");
}

// With a per-channel rate the transition is not symmetric, and the norm can
// exceed one for adversarial gates: a large decay on the channel with a tiny
// rate and a tiny decay on the channel with a large rate. The bound above is
// a property of the sampled distribution, not of every admissible draw.
#[test]
fn per_channel_rates_admit_expansive_transitions() {
    let eps = 1e-3;
    let k = std::f64::consts::FRAC_1_SQRT_2;
    let t = transition_oracle(&[eps, 1.0 - eps], &[k, k], &[1.0 - eps, eps]);
    let s = power_norm(&t);
    assert!(s > 1.1, "spectral norm {s}");
}

// A shared scalar rate makes the transition symmetric with eigenvalues in
// [min(w) − a, max(w)], so the bound holds for every admissible draw.
#[test]
fn scalar_rate_bound_is_universal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..1000 {
        let n = 1 + i % 8;
        let w: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { rng.random_range(0.0..1e-3) } else { rng.random_range(0.999..1.0) }).collect();
        let a = rng.random_range(0.0..1.0);
        let raw = Tensor::<f64>::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
        let k = normalize_key(&raw);
        let s = power_norm(&transition_oracle(&w, k.data(), &vec![a; n]));
        assert!(s <= 1.0 + 1e-6, "draw {i}: {s}");
    }
}

#[test]
fn rollout_norm_is_bounded_by_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = 4;
        let mut s = Tensor::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut bound = s.frobenius_norm();
        for _ in 0..16 {
            let t = TransitionTerms::<f64>::sample(n, &mut rng);
            bound += Tensor::outer(&t.value, &t.key).unwrap().frobenius_norm();
            s = wkv_step(&s, &t).unwrap();
            assert!(s.frobenius_norm() <= bound + 1e-12);
        }
    }
}

fn single_head_params(n: usize, rng: &mut ChaCha8Rng) -> TimeMixParams<f64> {
    let mut m = || Tensor::from_fn(n, n, |_, _| rng.random_range(-0.8..0.8));
    let (w_r, w_k, w_v, w_decay, w_kappa, w_rate, w_o) = (m(), m(), m(), m(), m(), m(), m());
    let mut v = |lo: f64, hi: f64| Tensor::from_fn(1, n, |_, _| rng.random_range(lo..hi));
    TimeMixParams {
        mu: v(0.0, 1.0),
        w_r,
        w_k,
        w_v,
        w_decay,
        b_decay: v(-0.5, 0.5),
        w_kappa,
        w_rate,
        b_rate: v(-0.5, 0.5),
        norm_gamma: v(0.5, 1.5),
        norm_beta: v(-0.5, 0.5),
        w_o,
        heads: 1,
        layout: NormLayout::plain(n, 1e-5),
    }
}

fn vec_mat(x: &[f64], m: &Tensor<f64>) -> Vec<f64> {
    (0..m.cols()).map(|j| (0..x.len()).map(|i| x[i] * m.get(i, j)).sum()).collect()
}

#[test]
fn single_head_step_seed_13_matches_hand_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 2;
    let p = single_head_params(n, &mut rng);
    let x = rows(n, &mut rng);
    let prev = rows(n, &mut rng);
    let state = Tensor::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let got = time_mix_forward(&x, &prev, std::slice::from_ref(&state), &p).unwrap();

    let mu = p.mu.data();
    let xs: Vec<f64> = (0..n).map(|i| mu[i] * x.get(0, i) + (1.0 - mu[i]) * prev.get(0, i)).collect();
    let r = vec_mat(&xs, &p.w_r);
    let k = vec_mat(&xs, &p.w_k);
    let v = vec_mat(&xs, &p.w_v);
    let w: Vec<f64> = vec_mat(&xs, &p.w_decay).iter().zip(p.b_decay.data()).map(|(a, b)| (-(a + b).exp()).exp()).collect();
    let raw_k = vec_mat(&xs, &p.w_kappa);
    let kn = raw_k.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let kappa: Vec<f64> = raw_k.iter().map(|x| x / kn).collect();
    let a: Vec<f64> = vec_mat(&xs, &p.w_rate).iter().zip(p.b_rate.data()).map(|(a, b)| 1.0 / (1.0 + (-(a + b)).exp())).collect();
    let tm = transition_oracle(&w, &kappa, &a);
    let mut next = mat_mul(&to_nested(&state), &tm);
    for i in 0..n {
        for j in 0..n {
            next[i][j] += v[i] * k[j];
        }
    }
    let read: Vec<f64> = (0..n).map(|i| (0..n).map(|j| r[j] * next[i][j]).sum()).collect();
    let mean = read.iter().sum::<f64>() / n as f64;
    let var = read.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let normed: Vec<f64> = (0..n).map(|i| (read[i] - mean) / (var + 1e-5).sqrt() * p.norm_gamma.get(0, i) + p.norm_beta.get(0, i)).collect();
    let out = vec_mat(&normed, &p.w_o);

    assert!(nested_rel_err(&got.states[0], &next) < 1e-12);
    for (g, w) in got.out.data().iter().zip(&out) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn silent_values_give_offset_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 3;
    let mut p = single_head_params(n, &mut rng);
    p.w_v = Tensor::zeros(n, n);
    let x = rows(n, &mut rng);
    let got = time_mix_forward(&x, &Tensor::zeros(1, n), &[Tensor::zeros(n, n)], &p).unwrap();
    assert_eq!(got.states[0], Tensor::zeros(n, n));
    let want = p.norm_beta.matmul(&p.w_o).unwrap();
    assert!(got.out.max_abs_diff(&want).unwrap() < 1e-15);
}

#[test]
fn step_output_ignores_later_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let n = 3;
    let p = single_head_params(n, &mut rng);
    let xs: Vec<_> = (0..6).map(|_| rows(n, &mut rng)).collect();
    let run = |xs: &[Tensor<f64>]| {
        let mut state = vec![Tensor::zeros(n, n)];
        let mut prev = Tensor::zeros(1, n);
        let mut outs = Vec::new();
        for x in xs {
            let s = time_mix_forward(x, &prev, &state, &p).unwrap();
            state = s.states;
            prev = x.clone();
            outs.push(s.out);
        }
        outs
    };
    let a = run(&xs);
    let mut changed = xs.clone();
    changed[4] = rows(n, &mut rng);
    changed[5] = rows(n, &mut rng);
    let b = run(&changed);
    assert_eq!(a[..4], b[..4]);
}
