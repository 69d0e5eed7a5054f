//! Causal softmax-attention baseline.
//!
//! Each block is a pre-norm multi-head attention sub-block followed by a
//! pre-norm ReLU feed-forward sub-block. The feed-forward width is chosen so
//! the parameter count matches a meta-state configuration of the same width,
//! depth and vocabulary. Inference keeps a key/value cache, so memory grows
//! with the sequence and per-token cost grows with the cache length.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::{gather_rows, softmax_rows};
use crate::norm::{norm_forward, NormLayout};
use crate::params::{init_bound, layer_key, ParamStore, EMBEDDING, HEAD, LN_OUT_BETA, LN_OUT_GAMMA};
use crate::tensor::{Real, Tensor};

pub mod block {
    pub const LN1_GAMMA: &str = "ln1.gamma";
    pub const LN1_BETA: &str = "ln1.beta";
    pub const W_Q: &str = "attn.w_q";
    pub const W_K: &str = "attn.w_k";
    pub const W_V: &str = "attn.w_v";
    pub const W_O: &str = "attn.w_o";
    pub const LN2_GAMMA: &str = "ln2.gamma";
    pub const LN2_BETA: &str = "ln2.beta";
    pub const FFN_W1: &str = "ffn.w1";
    pub const FFN_B1: &str = "ffn.b1";
    pub const FFN_W2: &str = "ffn.w2";
    pub const FFN_B2: &str = "ffn.b2";
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub norm_eps: f64,
}

impl BaselineConfig {
    /// Same width, heads, depth and vocabulary as `cfg`, with the
    /// feed-forward width that brings the parameter count closest to it.
    pub fn matched(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        // per layer: 4 D×D attention + D×F + F + F×D + D + two norms (4D);
        // the meta-state layer has 8D² + 11D
        let ffn = ((4 * d * d + 6 * d) as f64 / (2 * d + 1) as f64).round().max(1.0) as usize;
        BaselineConfig {
            vocab_size: cfg.vocab_size,
            d_model: d,
            n_heads: cfg.n_heads,
            n_layers: cfg.n_layers,
            ffn_dim: ffn,
            norm_eps: cfg.norm_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) || self.d_model == 0 {
            return Err(Error::Config(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads)));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.vocab_size < 2 {
            return Err(Error::Config(format!("invalid baseline config {self:?}")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.ffn_dim, self.vocab_size);
        2 * v * d + 2 * d + self.n_layers * (4 * d * d + 2 * d * f + f + d + 4 * d)
    }
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self::matched(&ModelConfig::tiny())
    }
}

/// Output of [`causal_attention`].
#[derive(Clone, Debug)]
pub struct Attention<F> {
    /// `T × D`, heads side by side.
    pub out: Tensor<F>,
    /// One `T × T` lower-triangular weight matrix per head.
    pub weights: Vec<Tensor<F>>,
}

/// `softmax(Q Kᵀ / √d + causal mask) V`, per head, over `T × D` inputs.
pub fn causal_attention<F: Real>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, heads: usize) -> Result<Attention<F>> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape("causal_attention", q.shape(), k.shape()));
    }
    if heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(Error::Contract(format!("{} columns do not split into {heads} heads", q.cols())));
    }
    let (t_len, d) = q.shape();
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut out = Tensor::zeros(t_len, d);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut scores = Tensor::full(t_len, t_len, F::neg_infinity());
        for i in 0..t_len {
            for j in 0..=i {
                let s: F = q.row(i)[cols.clone()].iter().zip(&k.row(j)[cols.clone()]).map(|(&a, &b)| a * b).sum();
                scores.set(i, j, s * scale);
            }
        }
        let w = softmax_rows(&scores);
        for i in 0..t_len {
            for j in 0..=i {
                let wij = w.get(i, j);
                for (o, &x) in out.row_mut(i)[cols.clone()].iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += wij * x;
                }
            }
        }
        weights.push(w);
    }
    Ok(Attention { out, weights })
}

/// Keys and values of every token seen so far, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<F> {
    pub keys: Vec<Vec<F>>,
    pub values: Vec<Vec<F>>,
    pub len: usize,
}

impl<F: Real> KvCache<F> {
    pub fn new(cfg: &BaselineConfig) -> Self {
        KvCache { keys: vec![Vec::new(); cfg.n_layers], values: vec![Vec::new(); cfg.n_layers], len: 0 }
    }

    pub fn byte_size(&self) -> usize {
        let elems: usize = self.keys.iter().chain(&self.values).map(Vec::len).sum();
        elems * std::mem::size_of::<F>()
    }
}

#[derive(Clone, Debug)]
pub struct Baseline<F> {
    pub config: BaselineConfig,
    pub params: ParamStore<F>,
}

impl<F: Real> Baseline<F> {
    /// Projections draw from `uniform(−a, a)` with `a = sqrt(1 / fan_in)`;
    /// norm gains start at 1 and offsets and biases at 0.
    pub fn init(config: &BaselineConfig, seed: u64) -> Result<Self> {
        use block::*;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.ffn_dim, config.vocab_size);
        let mut p = ParamStore::new();
        p.insert(EMBEDDING, Tensor::uniform(v, d, init_bound(d), &mut rng))?;
        for l in 0..config.n_layers {
            let key = |s: &str| layer_key(l, s);
            for g in [LN1_GAMMA, LN2_GAMMA] {
                p.insert(key(g), Tensor::full(1, d, F::one()))?;
            }
            for b in [LN1_BETA, LN2_BETA, FFN_B2] {
                p.insert(key(b), Tensor::zeros(1, d))?;
            }
            for w in [W_Q, W_K, W_V, W_O] {
                p.insert(key(w), Tensor::uniform(d, d, init_bound(d), &mut rng))?;
            }
            p.insert(key(FFN_W1), Tensor::uniform(d, f, init_bound(d), &mut rng))?;
            p.insert(key(FFN_B1), Tensor::zeros(1, f))?;
            p.insert(key(FFN_W2), Tensor::uniform(f, d, init_bound(f), &mut rng))?;
        }
        p.insert(LN_OUT_GAMMA, Tensor::full(1, d, F::one()))?;
        p.insert(LN_OUT_BETA, Tensor::zeros(1, d))?;
        p.insert(HEAD, Tensor::uniform(d, v, init_bound(d), &mut rng))?;
        Ok(Baseline { config: config.clone(), params: p })
    }

    fn norm(&self, x: &Tensor<F>, gamma: &str, beta: &str) -> Result<Tensor<F>> {
        let layout = NormLayout::plain(self.config.d_model, self.config.norm_eps);
        norm_forward(x, self.params.get(gamma)?, self.params.get(beta)?, &layout)
    }

    fn w(&self, l: usize, name: &str) -> Result<&Tensor<F>> {
        Ok(self.params.get(&layer_key(l, name))?.as_ref())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} out of range for vocabulary {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn feed_forward(&self, l: usize, x: &Tensor<F>) -> Result<Tensor<F>> {
        use block::*;
        let xn = self.norm(x, &layer_key(l, LN2_GAMMA), &layer_key(l, LN2_BETA))?;
        let h = add_row(&xn.matmul(self.w(l, FFN_W1)?)?, self.w(l, FFN_B1)?)?.relu();
        add_row(&h.matmul(self.w(l, FFN_W2)?)?, self.w(l, FFN_B2)?)
    }

    fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.norm(x, LN_OUT_GAMMA, LN_OUT_BETA)?.matmul(self.params.get(HEAD)?)
    }

    /// Logits for every position, plus the attention weights of every layer.
    pub fn forward_with_attention(&self, tokens: &[usize]) -> Result<(Tensor<F>, Vec<Attention<F>>)> {
        use block::*;
        self.check_tokens(tokens)?;
        let mut x = gather_rows(self.params.get(EMBEDDING)?, tokens)?;
        let mut attn = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let xn = self.norm(&x, &layer_key(l, LN1_GAMMA), &layer_key(l, LN1_BETA))?;
            let a = causal_attention(
                &xn.matmul(self.w(l, W_Q)?)?,
                &xn.matmul(self.w(l, W_K)?)?,
                &xn.matmul(self.w(l, W_V)?)?,
                self.config.n_heads,
            )?;
            x = x.add(&a.out.matmul(self.w(l, W_O)?)?)?;
            x = x.add(&self.feed_forward(l, &x)?)?;
            attn.push(a);
        }
        Ok((self.logits(&x)?, attn))
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<F>> {
        Ok(self.forward_with_attention(tokens)?.0)
    }

    /// Consumes one token against the cache, returning its `1 × V` logits.
    pub fn step(&self, token: usize, cache: &mut KvCache<F>) -> Result<Tensor<F>> {
        use block::*;
        self.check_tokens(&[token])?;
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut x = self.params.get(EMBEDDING)?.slice(token, token + 1, 0, d)?;
        let len = cache.len + 1;
        let mut scores = vec![F::zero(); len];
        for l in 0..self.config.n_layers {
            let xn = self.norm(&x, &layer_key(l, LN1_GAMMA), &layer_key(l, LN1_BETA))?;
            let q = xn.matmul(self.w(l, W_Q)?)?;
            cache.keys[l].extend_from_slice(xn.matmul(self.w(l, W_K)?)?.data());
            cache.values[l].extend_from_slice(xn.matmul(self.w(l, W_V)?)?.data());
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let mut mixed = Tensor::zeros(1, d);
            for h in 0..self.config.n_heads {
                let qh = &q.data()[h * dh..(h + 1) * dh];
                let mut max = F::neg_infinity();
                for (s, k) in scores.iter_mut().zip(keys.chunks_exact(d)) {
                    *s = qh.iter().zip(&k[h * dh..(h + 1) * dh]).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    max = max.max(*s);
                }
                let mut total = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let out = &mut mixed.data_mut()[h * dh..(h + 1) * dh];
                for (&s, v) in scores.iter().zip(values.chunks_exact(d)) {
                    let w = s / total;
                    for (o, &x) in out.iter_mut().zip(&v[h * dh..(h + 1) * dh]) {
                        *o += w * x;
                    }
                }
            }
            x = x.add(&mixed.matmul(self.w(l, W_O)?)?)?;
            x = x.add(&self.feed_forward(l, &x)?)?;
        }
        cache.len = len;
        self.logits(&x)
    }
}

fn add_row<F: Real>(x: &Tensor<F>, row: &Tensor<F>) -> Result<Tensor<F>> {
    if row.shape() != (1, x.cols()) {
        return Err(Error::shape("add_row", x.shape(), row.shape()));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o += b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn small() -> BaselineConfig {
        BaselineConfig { vocab_size: 13, d_model: 8, n_heads: 2, n_layers: 2, ffn_dim: 12, norm_eps: 1e-5 }
    }

    #[test]
    fn matched_count_within_five_percent() {
        for name in ["tiny", "mini", "150m"] {
            let cfg = ModelConfig::preset(name, DType::F64).unwrap();
            let b = BaselineConfig::matched(&cfg);
            let ratio = b.param_count() as f64 / cfg.param_count() as f64;
            assert!((ratio - 1.0).abs() < 0.05, "{name}: ratio {ratio}");
        }
    }

    #[test]
    fn count_matches_store() {
        let cfg = small();
        let m = Baseline::<f64>::init(&cfg, 1).unwrap();
        assert_eq!(m.params.element_count(), cfg.param_count());
    }

    #[test]
    fn cached_steps_match_full_forward() {
        let cfg = small();
        let m = Baseline::<f64>::init(&cfg, 2).unwrap();
        let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
        let full = m.forward(&tokens).unwrap();
        let mut cache = KvCache::new(&cfg);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = m.step(tok, &mut cache).unwrap();
            for (a, b) in row.data().iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(cache.len, tokens.len());
    }

    #[test]
    fn cache_grows_with_sequence() {
        let cfg = small();
        let m = Baseline::<f32>::init(&cfg, 3).unwrap();
        let mut cache = KvCache::new(&cfg);
        m.step(1, &mut cache).unwrap();
        let one = cache.byte_size();
        m.step(2, &mut cache).unwrap();
        assert_eq!(cache.byte_size(), 2 * one);
    }
}
