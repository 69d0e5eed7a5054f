//! Self-state encoder and meta-state recurrence.
//!
//! The encoder reads the current WKV state as a weight matrix,
//! `z = ReLU(x · wkv)`, so it owns no trainable tensors. The meta-state
//! evolves under the time-mixing transition, `ms = ms · T + zᵀz`, and the
//! layer output is `norm(z · msᵀ) · W_o` summed over heads.

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::norm::{norm_forward, NormLayout};
use crate::params::{layer, layer_key, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::time_mix::{head_layout, transition_matrix, TimeMixTrace, TransitionTerms};

/// `ReLU(x_head · wkv)`.
pub fn sse_encode<F: Real>(x_head: &Tensor<F>, wkv: &Tensor<F>) -> Result<Tensor<F>> {
    if x_head.rows() != 1 || x_head.cols() != wkv.rows() || wkv.rows() != wkv.cols() {
        return Err(Error::shape("sse_encode", x_head.shape(), wkv.shape()));
    }
    Ok(x_head.matmul(wkv)?.relu())
}

/// `ms · T + zᵀz`, with `T` built from the same terms as the WKV update.
pub fn meta_state_step<F: Real>(ms_prev: &Tensor<F>, t: &TransitionTerms<F>, z: &Tensor<F>) -> Result<Tensor<F>> {
    let n = t.dim();
    if ms_prev.shape() != (n, n) || z.shape() != (1, n) {
        return Err(Error::shape("meta_state_step", ms_prev.shape(), z.shape()));
    }
    ms_prev.matmul(&transition_matrix(t))?.add(&Tensor::outer(z, z)?)
}

/// Output weights of one head.
#[derive(Clone, Debug)]
pub struct MetaStateHead<F> {
    /// `n × D` block of the output projection.
    pub w_o: Tensor<F>,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub layout: NormLayout,
}

/// `norm(z · msᵀ) · W_o` for one head.
pub fn meta_state_output<F: Real>(z: &Tensor<F>, ms: &Tensor<F>, p: &MetaStateHead<F>) -> Result<Tensor<F>> {
    let q = z.matmul(&ms.transpose())?;
    let q = norm_forward(&q, &p.gamma, &p.beta, &p.layout)?;
    q.matmul(&p.w_o)
}

/// Meta-state weights of one layer: the output projection stacked over heads
/// and the per-head norm. A grown layer also carries its encoder input
/// projection.
#[derive(Clone, Debug)]
pub struct MetaStateParams<F> {
    /// `(H·n) × D`.
    pub w_o: Tensor<F>,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    /// `(H·n₀) × n`, present only in grown models.
    pub w_in: Option<Tensor<F>>,
    pub heads: usize,
    pub eps: f64,
    pub active: usize,
}

impl<F: Real> MetaStateParams<F> {
    pub fn from_store(store: &ParamStore<F>, cfg: &ModelConfig, l: usize) -> Result<Self> {
        let get = |s: &str| -> Result<Tensor<F>> { Ok(store.get(&layer_key(l, s))?.as_ref().clone()) };
        let w_in = if cfg.is_grown() { Some(get(layer::SCALE_W_IN)?) } else { None };
        Ok(MetaStateParams {
            w_o: get(layer::MS_W_O)?,
            gamma: get(layer::MS_NORM_GAMMA)?,
            beta: get(layer::MS_NORM_BETA)?,
            w_in,
            heads: cfg.n_heads,
            eps: cfg.norm_eps,
            active: cfg.active_head_dim(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.w_o.rows() / self.heads
    }

    /// Per-head view of the output weights.
    pub fn head(&self, h: usize) -> Result<MetaStateHead<F>> {
        let n = self.head_dim();
        let d = self.w_o.cols();
        Ok(MetaStateHead {
            w_o: self.w_o.slice(h * n, (h + 1) * n, 0, d)?,
            gamma: self.gamma.slice(0, 1, h * n, (h + 1) * n)?,
            beta: self.beta.slice(0, 1, h * n, (h + 1) * n)?,
            layout: NormLayout { blocks: 1, active: self.active, joint: true, eps: self.eps },
        })
    }

    /// Input slice of head `h` as seen by the encoder.
    pub fn encoder_input(&self, x: &Tensor<F>, h: usize) -> Result<Tensor<F>> {
        let n = self.head_dim();
        match &self.w_in {
            None => x.slice(0, 1, h * n, (h + 1) * n),
            Some(w_in) => {
                let n0 = w_in.rows() / self.heads;
                let xh = x.slice(0, 1, h * n, h * n + n0)?;
                xh.matmul(&w_in.slice(h * n0, (h + 1) * n0, 0, n)?)
            }
        }
    }
}

/// Result of one value-level meta-state step.
#[derive(Clone, Debug)]
pub struct MetaStateStep<F> {
    pub out: Tensor<F>,
    pub states: Vec<Tensor<F>>,
    pub encoded: Vec<Tensor<F>>,
}

/// One step of the whole layer: per head encode, evolve, project; head
/// contributions summed.
pub fn meta_state_layer<F: Real>(
    x_prime: &Tensor<F>,
    wkv: &[Tensor<F>],
    ms: &[Tensor<F>],
    terms: &[TransitionTerms<F>],
    p: &MetaStateParams<F>,
) -> Result<MetaStateStep<F>> {
    let h = p.heads;
    if wkv.len() != h || ms.len() != h || terms.len() != h {
        return Err(Error::Contract(format!(
            "meta-state layer with {h} heads got {} wkv, {} ms, {} terms",
            wkv.len(),
            ms.len(),
            terms.len()
        )));
    }
    let mut out = Tensor::zeros(1, p.w_o.cols());
    let mut states = Vec::with_capacity(h);
    let mut encoded = Vec::with_capacity(h);
    for j in 0..h {
        let z = sse_encode(&p.encoder_input(x_prime, j)?, &wkv[j])?;
        let next = meta_state_step(&ms[j], &terms[j], &z)?;
        out = out.add(&meta_state_output(&z, &next, &p.head(j)?)?)?;
        states.push(next);
        encoded.push(z);
    }
    Ok(MetaStateStep { out, states, encoded })
}

/// Tape nodes produced by [`record`].
#[derive(Clone, Copy, Debug)]
pub struct MetaStateTrace {
    pub encoded: Var,
    pub states: Var,
    pub out: Var,
}

/// Records the layer over a `T × D` window of normalized inputs, reading the
/// post-update WKV states and transition terms of the same layer.
pub fn record<F: Real>(g: &mut Graph<'_, F>, cfg: &ModelConfig, l: usize, x: Var, tm: &TimeMixTrace, init: Var) -> Result<MetaStateTrace> {
    let heads = cfg.n_heads;
    let w_in = if cfg.is_grown() { Some(g.param(&layer_key(l, layer::SCALE_W_IN))?) } else { None };
    let w_o = g.param(&layer_key(l, layer::MS_W_O))?;
    let gamma = g.param(&layer_key(l, layer::MS_NORM_GAMMA))?;
    let beta = g.param(&layer_key(l, layer::MS_NORM_BETA))?;
    let t = &mut g.tape;
    let input = match w_in {
        Some(p) => t.head_project(x, p, heads)?,
        None => x,
    };
    let z = t.head_encode(input, tm.states, heads)?;
    let z = t.relu(z)?;
    let states = t.state_scan(init, tm.decay, tm.kappa, tm.rate, z, z, heads)?;
    let q = t.head_readout(z, states, heads)?;
    let q = t.norm(q, gamma, beta, head_layout(cfg))?;
    let out = t.matmul(q, w_o)?;
    Ok(MetaStateTrace { encoded: z, states, out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_state_encodes_to_zero() {
        let x = Tensor::row_vector(vec![1.0, -2.0, 3.0]);
        assert_eq!(sse_encode(&x, &Tensor::zeros(3, 3)).unwrap(), Tensor::zeros(1, 3));
    }

    #[test]
    fn identity_state_is_relu() {
        let x = Tensor::row_vector(vec![-1.0, 2.0]);
        assert_eq!(sse_encode(&x, &Tensor::<f64>::identity(2)).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn encoder_rejects_mismatch() {
        let x = Tensor::<f64>::zeros(1, 3);
        assert!(matches!(sse_encode(&x, &Tensor::zeros(2, 2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn first_step_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = TransitionTerms::<f64>::sample(4, &mut rng);
        let z = Tensor::row_vector(vec![0.0, 1.5, 0.25, 2.0]);
        let ms = meta_state_step(&Tensor::zeros(4, 4), &t, &z).unwrap();
        assert_eq!(ms, ms.transpose());
        for i in 0..4 {
            assert!(ms.get(i, i) >= 0.0);
        }
    }

    #[test]
    fn zero_encoding_only_transitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = TransitionTerms::<f64>::sample(3, &mut rng);
        let prev = Tensor::from_fn(3, 3, |r, c| (r as f64) - 0.5 * c as f64);
        let got = meta_state_step(&prev, &t, &Tensor::zeros(1, 3)).unwrap();
        assert_eq!(got, prev.matmul(&transition_matrix(&t)).unwrap());
    }
}
