//! Time-mixing block: token shift, per-head transition terms, the WKV state
//! recurrence and the block output.
//!
//! Two routes compute the same thing. The value-level functions work one step
//! and one head at a time with explicit matrices and serve as a readable
//! reference. [`record`] puts a whole window on a differentiation tape using
//! the fused sequence kernels.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels::{self, KAPPA_NORM_FLOOR};
use crate::norm::{norm_forward, NormLayout};
use crate::params::{layer, layer_key, ParamStore};
use crate::tensor::{Real, Tensor};

/// Per-head, per-step quantities derived from the shifted input.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTerms<F> {
    /// `w` in (0, 1).
    pub decay: Tensor<F>,
    /// Unit-norm removal key.
    pub kappa: Tensor<F>,
    /// In-context learning rate in (0, 1).
    pub rate: Tensor<F>,
    pub key: Tensor<F>,
    pub value: Tensor<F>,
    pub receptance: Tensor<F>,
}

impl<F: Real> TransitionTerms<F> {
    pub fn dim(&self) -> usize {
        self.decay.cols()
    }

    /// Checks the unit-norm key and the open-interval gates.
    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        for (name, t) in [
            ("kappa", &self.kappa),
            ("rate", &self.rate),
            ("key", &self.key),
            ("value", &self.value),
            ("receptance", &self.receptance),
        ] {
            if t.shape() != (1, n) {
                return Err(Error::Contract(format!("{name} has shape {:?}, expected (1, {n})", t.shape())));
            }
        }
        let norm = self.kappa.frobenius_norm().as_f64();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("removal key norm {norm} is not 1")));
        }
        let open = |t: &Tensor<F>| t.data().iter().all(|&v| v > F::zero() && v < F::one());
        if !open(&self.decay) || !open(&self.rate) {
            return Err(Error::Contract("decay and rate must lie strictly inside (0, 1)".into()));
        }
        Ok(())
    }

    /// Terms built from raw pre-activations through the constraint maps.
    pub fn from_raw(raw_decay: &Tensor<F>, raw_kappa: &Tensor<F>, raw_rate: &Tensor<F>, key: Tensor<F>, value: Tensor<F>, receptance: Tensor<F>) -> Self {
        TransitionTerms {
            decay: constrain_decay(raw_decay),
            kappa: normalize_key(raw_kappa),
            rate: raw_rate.sigmoid(),
            key,
            value,
            receptance,
        }
    }

    /// Draws raw pre-activations from a standard normal and maps them
    /// through the constraints.
    pub fn sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut normal = || Tensor::from_fn(1, n, |_, _| F::of(rng.sample::<f64, _>(StandardNormal)));
        let (rd, rk, ra) = (normal(), normal(), normal());
        let (k, v, r) = (normal(), normal(), normal());
        Self::from_raw(&rd, &rk, &ra, k, v, r)
    }
}

/// `exp(−exp(raw))`, mapping the reals into (0, 1).
pub fn constrain_decay<F: Real>(raw: &Tensor<F>) -> Tensor<F> {
    raw.map(|v| (-v.exp()).exp())
}

/// `raw / max(‖raw‖₂, 1e-8)`.
pub fn normalize_key<F: Real>(raw: &Tensor<F>) -> Tensor<F> {
    let d = raw.frobenius_norm().max(F::of(KAPPA_NORM_FLOOR));
    raw.map(|v| v / d)
}

/// `mu ⊙ x + (1 − mu) ⊙ x_prev` with `mu` clamped to [0, 1].
pub fn token_shift<F: Real>(x: &Tensor<F>, x_prev: &Tensor<F>, mu: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rows() != 1 {
        return Err(Error::shape("token_shift", x.shape(), x_prev.shape()));
    }
    kernels::token_shift(x, x_prev, mu)
}

/// `diag(w) − κ̂ᵀ(a ⊙ κ̂)`.
pub fn transition_matrix<F: Real>(t: &TransitionTerms<F>) -> Tensor<F> {
    let n = t.dim();
    let w = t.decay.data();
    let k = t.kappa.data();
    let a = t.rate.data();
    Tensor::from_fn(n, n, |i, j| {
        let diag = if i == j { w[i] } else { F::zero() };
        diag - k[i] * (a[j] * k[j])
    })
}

/// `wkv · T + vᵀk`.
pub fn wkv_step<F: Real>(wkv_prev: &Tensor<F>, t: &TransitionTerms<F>) -> Result<Tensor<F>> {
    let n = t.dim();
    if wkv_prev.shape() != (n, n) {
        return Err(Error::shape("wkv_step", wkv_prev.shape(), (n, n)));
    }
    wkv_prev.matmul(&transition_matrix(t))?.add(&Tensor::outer(&t.value, &t.key)?)
}

/// Time-mixing weights of one layer.
#[derive(Clone, Debug)]
pub struct TimeMixParams<F> {
    pub mu: Tensor<F>,
    pub w_r: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub w_decay: Tensor<F>,
    pub b_decay: Tensor<F>,
    pub w_kappa: Tensor<F>,
    pub w_rate: Tensor<F>,
    pub b_rate: Tensor<F>,
    pub norm_gamma: Tensor<F>,
    pub norm_beta: Tensor<F>,
    pub w_o: Tensor<F>,
    pub heads: usize,
    /// Per-head norm layout.
    pub layout: NormLayout,
}

impl<F: Real> TimeMixParams<F> {
    pub fn from_store(store: &ParamStore<F>, cfg: &ModelConfig, l: usize) -> Result<Self> {
        let get = |s: &str| -> Result<Tensor<F>> { Ok(store.get(&layer_key(l, s))?.as_ref().clone()) };
        use layer::*;
        Ok(TimeMixParams {
            mu: get(TM_MU)?,
            w_r: get(TM_W_R)?,
            w_k: get(TM_W_K)?,
            w_v: get(TM_W_V)?,
            w_decay: get(TM_W_DECAY)?,
            b_decay: get(TM_B_DECAY)?,
            w_kappa: get(TM_W_KAPPA)?,
            w_rate: get(TM_W_RATE)?,
            b_rate: get(TM_B_RATE)?,
            norm_gamma: get(TM_NORM_GAMMA)?,
            norm_beta: get(TM_NORM_BETA)?,
            w_o: get(TM_W_O)?,
            heads: cfg.n_heads,
            layout: head_layout(cfg),
        })
    }

    pub fn dim(&self) -> usize {
        self.w_r.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

/// Per-head normalization with statistics over the active head prefix.
pub fn head_layout(cfg: &ModelConfig) -> NormLayout {
    NormLayout { blocks: cfg.n_heads, active: cfg.active_head_dim(), joint: false, eps: cfg.norm_eps }
}

/// Residual-stream normalization: one set of statistics over the active
/// prefix of every head.
pub fn stream_layout(cfg: &ModelConfig) -> NormLayout {
    NormLayout { blocks: cfg.n_heads, active: cfg.active_head_dim(), joint: true, eps: cfg.norm_eps }
}

/// Splits a shifted row into per-head transition terms.
pub fn derive_terms<F: Real>(x_shifted: &Tensor<F>, p: &TimeMixParams<F>) -> Result<Vec<TransitionTerms<F>>> {
    let r = x_shifted.matmul(&p.w_r)?;
    let k = x_shifted.matmul(&p.w_k)?;
    let v = x_shifted.matmul(&p.w_v)?;
    let raw_w = x_shifted.matmul(&p.w_decay)?.add(&p.b_decay)?;
    let raw_kappa = x_shifted.matmul(&p.w_kappa)?;
    let raw_a = x_shifted.matmul(&p.w_rate)?.add(&p.b_rate)?;
    let n = p.head_dim();
    (0..p.heads)
        .map(|h| {
            let s = |t: &Tensor<F>| t.slice(0, 1, h * n, (h + 1) * n);
            Ok(TransitionTerms::from_raw(&s(&raw_w)?, &s(&raw_kappa)?, &s(&raw_a)?, s(&k)?, s(&v)?, s(&r)?))
        })
        .collect()
}

/// Result of one value-level time-mixing step.
#[derive(Clone, Debug)]
pub struct TimeMixStep<F> {
    pub out: Tensor<F>,
    pub states: Vec<Tensor<F>>,
    pub terms: Vec<TransitionTerms<F>>,
}

/// One step for one token: per head `norm(r · wkvᵀ)`, heads concatenated and
/// projected by the output matrix.
pub fn time_mix_forward<F: Real>(
    x: &Tensor<F>,
    x_prev: &Tensor<F>,
    states: &[Tensor<F>],
    p: &TimeMixParams<F>,
) -> Result<TimeMixStep<F>> {
    if states.len() != p.heads {
        return Err(Error::Contract(format!("{} head states for {} heads", states.len(), p.heads)));
    }
    let xs = token_shift(x, x_prev, &p.mu)?;
    let terms = derive_terms(&xs, p)?;
    let mut new_states = Vec::with_capacity(p.heads);
    let mut reads = Vec::with_capacity(p.heads);
    for (s, t) in states.iter().zip(&terms) {
        let next = wkv_step(s, t)?;
        reads.push(t.receptance.matmul(&next.transpose())?);
        new_states.push(next);
    }
    let y = Tensor::concat_cols(&reads.iter().collect::<Vec<_>>())?;
    let y = norm_forward(&y, &p.norm_gamma, &p.norm_beta, &p.layout)?;
    Ok(TimeMixStep { out: y.matmul(&p.w_o)?, states: new_states, terms })
}

/// Tape nodes produced by [`record`].
#[derive(Clone, Copy, Debug)]
pub struct TimeMixTrace {
    /// `(T·H·n) × n` post-update states of every step.
    pub states: Var,
    pub decay: Var,
    pub kappa: Var,
    pub rate: Var,
    pub out: Var,
}

/// Records the block over a `T × D` window. `prev` is the `1 × D` input
/// preceding the window and `init` the `(H·n) × n` stacked head states.
pub fn record<F: Real>(g: &mut Graph<'_, F>, cfg: &ModelConfig, l: usize, x: Var, prev: Var, init: Var) -> Result<TimeMixTrace> {
    use layer::*;
    let heads = cfg.n_heads;
    let mut p = |s: &str| g.param(&layer_key(l, s));
    let (mu, w_r, w_k, w_v) = (p(TM_MU)?, p(TM_W_R)?, p(TM_W_K)?, p(TM_W_V)?);
    let (w_decay, b_decay, w_kappa) = (p(TM_W_DECAY)?, p(TM_B_DECAY)?, p(TM_W_KAPPA)?);
    let (w_rate, b_rate, w_o) = (p(TM_W_RATE)?, p(TM_B_RATE)?, p(TM_W_O)?);
    let (gamma, beta) = (p(TM_NORM_GAMMA)?, p(TM_NORM_BETA)?);
    let t = &mut g.tape;
    let xs = t.token_shift(x, prev, mu)?;
    let r = t.matmul(xs, w_r)?;
    let k = t.matmul(xs, w_k)?;
    let v = t.matmul(xs, w_v)?;
    let raw_w = t.matmul(xs, w_decay)?;
    let raw_w = t.add_row(raw_w, b_decay)?;
    let e = t.exp(raw_w)?;
    let e = t.scale(e, -1.0)?;
    let decay = t.exp(e)?;
    let raw_kappa = t.matmul(xs, w_kappa)?;
    let kappa = t.l2_normalize(raw_kappa, heads)?;
    let raw_a = t.matmul(xs, w_rate)?;
    let raw_a = t.add_row(raw_a, b_rate)?;
    let rate = t.sigmoid(raw_a)?;
    let states = t.state_scan(init, decay, kappa, rate, k, v, heads)?;
    let y = t.head_readout(r, states, heads)?;
    let y = t.norm(y, gamma, beta, head_layout(cfg))?;
    let out = t.matmul(y, w_o)?;
    Ok(TimeMixTrace { states, decay, kappa, rate, out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::row_vector(v.to_vec())
    }

    #[test]
    fn token_shift_examples() {
        let x = row(&[2.0]);
        let prev = row(&[4.0]);
        assert_eq!(token_shift(&x, &prev, &row(&[0.5])).unwrap().data(), &[3.0]);
        assert_eq!(token_shift(&x, &prev, &row(&[1.0])).unwrap(), x);
        assert_eq!(token_shift(&x, &prev, &row(&[0.0])).unwrap(), prev);
    }

    #[test]
    fn zero_raw_gates() {
        let z = Tensor::<f64>::zeros(1, 3);
        let t = TransitionTerms::from_raw(&z, &row(&[3.0, 4.0, 0.0]), &z, z.clone(), z.clone(), z.clone());
        for &w in t.decay.data() {
            assert!((w - (-1.0f64).exp()).abs() < 1e-15);
        }
        assert!(t.rate.data().iter().all(|&a| a == 0.5));
        assert_eq!(t.kappa.data(), &[0.6, 0.8, 0.0]);
        t.validate().unwrap();
    }

    #[test]
    fn vanishing_rate_leaves_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = TransitionTerms::<f64>::sample(4, &mut rng);
        t.rate = Tensor::full(1, 4, 1e-9);
        let m = transition_matrix(&t);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { t.decay.get(0, i) } else { 0.0 };
                assert!((m.get(i, j) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn unit_gates_project_out_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = TransitionTerms::<f64>::sample(5, &mut rng);
        t.decay = Tensor::full(1, 5, 1.0);
        t.rate = Tensor::full(1, 5, 1.0);
        let m = transition_matrix(&t);
        let mk = m.matmul(&t.kappa.transpose()).unwrap();
        assert!(mk.max_abs() < 1e-12);
    }

    #[test]
    fn first_step_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = TransitionTerms::<f64>::sample(2, &mut rng);
        t.value = row(&[1.0, 0.0]);
        t.key = row(&[0.0, 1.0]);
        let s = wkv_step(&Tensor::zeros(2, 2), &t).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_mismatched_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = TransitionTerms::<f64>::sample(3, &mut rng);
        assert!(matches!(wkv_step(&Tensor::zeros(2, 2), &t), Err(Error::Shape { .. })));
    }
}
