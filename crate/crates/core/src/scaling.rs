//! Function-preserving growth of the head width.
//!
//! A model with width `D = h·n` grows to `D' = h·n'` with the head count
//! fixed. Channel `j·n + i` of the old model becomes channel `j·n' + i` of the
//! new one, so each head keeps its original coordinates as a prefix. Every
//! tensor is block-embedded under this map. In zeros mode the new entries
//! are zero except where the tensor's initializer uses a constant (norm
//! gains 1, token-shift mix 0.5), and the self-state encoder reads its input
//! through a per-head projection `W_in = [I | 0]`.
//!
//! Norm statistics of the grown model range over the original head prefix
//! (`ModelConfig::origin_head_dim`). Together with the zero blocks this makes
//! every original channel compute exactly what it did before, and every new
//! channel of the residual stream stay at zero.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Mask, Masks};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{self, init_bound, layer, parse_layer_key, ParamStore};
use crate::tensor::{Real, Tensor};

/// How new entries are filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitMode {
    Zeros,
    /// `uniform(−s, s)` added to the initializer constant.
    Uniform(f64),
}

/// How a fresh encoder input projection starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    TruncatedIdentity,
    Random,
}

/// Which original entries are frozen for fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Every original entry of every tensor.
    AllOriginal,
    /// Only the original block of the meta-state output and its norm.
    MetaStateOnly,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalePlan {
    pub source: ModelConfig,
    pub target: ModelConfig,
    pub init: InitMode,
    pub projection: Projection,
    pub freeze: FreezePolicy,
}

impl ScalePlan {
    /// Zeros mode, truncated identity, all original entries frozen.
    pub fn new(source: &ModelConfig, d_model: usize, n_heads: usize) -> Result<Self> {
        source.validate()?;
        if n_heads != source.n_heads {
            return Err(Error::Contract(format!(
                "growth keeps the head count: source has {} heads, plan asks for {n_heads}",
                source.n_heads
            )));
        }
        if d_model < source.d_model {
            return Err(Error::Contract(format!("cannot shrink width {} to {d_model}", source.d_model)));
        }
        if !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("width {d_model} does not split into {n_heads} heads")));
        }
        let mut target = source.clone();
        target.d_model = d_model;
        target.preset = None;
        if d_model > source.d_model {
            target.origin_head_dim = Some(source.active_head_dim());
        }
        target.validate()?;
        Ok(ScalePlan {
            source: source.clone(),
            target,
            init: InitMode::Zeros,
            projection: Projection::TruncatedIdentity,
            freeze: FreezePolicy::AllOriginal,
        })
    }

    pub fn with_init(mut self, init: InitMode) -> Self {
        self.init = init;
        self
    }

    pub fn with_projection(mut self, projection: Projection) -> Self {
        self.projection = projection;
        self
    }

    pub fn with_freeze(mut self, freeze: FreezePolicy) -> Self {
        self.freeze = freeze;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.source.d_model == self.target.d_model
    }

    /// Whether new entries are exactly the preserving values.
    pub fn is_preserving(&self) -> bool {
        self.init == InitMode::Zeros && (self.projection == Projection::TruncatedIdentity || self.source.is_grown())
    }

    /// New index of old channel `c`.
    pub fn channel(&self, c: usize) -> usize {
        let (n, n2) = (self.source.head_dim(), self.target.head_dim());
        (c / n) * n2 + c % n
    }
}

/// Embeds a square state as the top-left block of a `new_dim` square.
pub fn expand_state<F: Real>(s: &Tensor<F>, new_dim: usize) -> Result<Tensor<F>> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::shape("expand_state", s.shape(), (n, n)));
    }
    if new_dim < n {
        return Err(Error::Contract(format!("cannot shrink a {n}-wide state to {new_dim}")));
    }
    if new_dim == n {
        return Ok(s.clone());
    }
    Ok(Tensor::from_fn(new_dim, new_dim, |r, c| if r < n && c < n { s.get(r, c) } else { F::zero() }))
}

/// Stacked per-head states `(H·n) × n` expanded head by head.
pub fn expand_stacked<F: Real>(s: &Tensor<F>, heads: usize, new_dim: usize) -> Result<Tensor<F>> {
    let n = s.cols();
    let blocks = (0..heads)
        .map(|h| expand_state(&s.slice(h * n, (h + 1) * n, 0, n)?, new_dim))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&blocks.iter().collect::<Vec<_>>())
}

/// `ReLU((x · W_in) · wkv)` for one head of a grown model.
pub fn scaled_sse_encode<F: Real>(x_head: &Tensor<F>, w_in: &Tensor<F>, wkv: &Tensor<F>) -> Result<Tensor<F>> {
    if x_head.cols() != w_in.rows() || w_in.cols() != wkv.rows() || wkv.rows() != wkv.cols() {
        return Err(Error::shape("scaled_sse_encode", w_in.shape(), wkv.shape()));
    }
    Ok(x_head.matmul(w_in)?.matmul(wkv)?.relu())
}

/// `[I | 0]` blocks stacked over heads: `(H·n₀) × n`.
pub fn truncated_identity<F: Real>(heads: usize, n0: usize, n: usize) -> Tensor<F> {
    Tensor::from_fn(heads * n0, n, |r, c| if r % n0 == c { F::one() } else { F::zero() })
}

/// Places `src` into a `rows × cols` tensor filled by `fill`, moving entry
/// `(r, c)` to `(row_map(r), col_map(c))`. Returns the tensor and the mask of
/// original positions.
fn embed(
    src: &Tensor<f64>,
    rows: usize,
    cols: usize,
    row_map: impl Fn(usize) -> usize,
    col_map: impl Fn(usize) -> usize,
    mut fill: impl FnMut() -> f64,
) -> (Tensor<f64>, Mask) {
    let mut out = Tensor::from_fn(rows, cols, |_, _| fill());
    let mut mask = Mask::new(rows, cols);
    for r in 0..src.rows() {
        let r2 = row_map(r);
        for c in 0..src.cols() {
            let c2 = col_map(c);
            out.set(r2, c2, src.get(r, c));
            mask.frozen[r2 * cols + c2] = true;
        }
    }
    (out, mask)
}

/// Extends the stacked meta-state output projection `(H·n) × D` to
/// `(H·n') × D'`; each head's `n × D` block keeps its entries in the top-left
/// of its new `n' × D'` block under the channel map.
pub fn extend_output_projection(w_o: &Tensor<f64>, plan: &ScalePlan, seed: u64) -> Result<Tensor<f64>> {
    let (d, d2) = (plan.source.d_model, plan.target.d_model);
    if w_o.shape() != (d, d) {
        return Err(Error::shape("extend_output_projection", w_o.shape(), (d, d)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill = filler(plan.init, 0.0, &mut rng);
    Ok(embed(w_o, d2, d2, |r| plan.channel(r), |c| plan.channel(c), fill).0)
}

fn filler<'r>(init: InitMode, base: f64, rng: &'r mut ChaCha8Rng) -> impl FnMut() -> f64 + 'r {
    move || match init {
        InitMode::Zeros => base,
        InitMode::Uniform(s) => base + rng.random_range(-s..=s),
    }
}

/// Initializer constant for new entries of a width-`D` vector.
fn vector_base(suffix: &str) -> f64 {
    if layer::GAINS.contains(&suffix) || suffix == "ln_out.gamma" {
        1.0
    } else if suffix == layer::TM_MU {
        0.5
    } else {
        0.0
    }
}

/// Grows every tensor of `ckpt` per `plan`, attaching freeze masks. Optimizer
/// moments are dropped.
pub fn scale_checkpoint(ckpt: &Checkpoint, plan: &ScalePlan, seed: u64) -> Result<Checkpoint> {
    if ckpt.config != plan.source {
        return Err(Error::Checkpoint("checkpoint config does not match the plan source".into()));
    }
    if plan.is_identity() {
        let mut out = ckpt.clone();
        out.masks.get_or_insert_with(Masks::new);
        return Ok(out);
    }
    let src = &plan.source;
    let tgt = &plan.target;
    let (d2, v) = (tgt.d_model, tgt.vocab_size);
    let (n, n2) = (src.head_dim(), tgt.head_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut masks = Masks::new();
    let ch = |c: usize| plan.channel(c);
    let same = |r: usize| r;
    for (name, t) in ckpt.params.iter() {
        let suffix = parse_layer_key(name).map(|(_, s)| s).unwrap_or(name);
        let (grown, mask) = if name == params::EMBEDDING {
            embed(t, v, d2, same, ch, filler(plan.init, 0.0, &mut rng))
        } else if name == params::HEAD {
            embed(t, d2, v, ch, same, filler(plan.init, 0.0, &mut rng))
        } else if suffix == layer::SCALE_W_IN {
            // an earlier growth: same input width, wider output
            embed(t, t.rows(), n2, same, same, filler(plan.init, 0.0, &mut rng))
        } else if t.rows() == 1 {
            embed(t, 1, d2, same, ch, filler(plan.init, vector_base(suffix), &mut rng))
        } else {
            embed(t, d2, d2, ch, ch, filler(plan.init, 0.0, &mut rng))
        };
        params.insert(name, grown)?;
        masks.insert(name.to_string(), mask);
    }
    if !src.is_grown() {
        for l in 0..src.n_layers {
            let w_in = match plan.projection {
                Projection::TruncatedIdentity => truncated_identity(src.n_heads, n, n2),
                Projection::Random => Tensor::uniform(src.n_heads * n, n2, init_bound(n), &mut rng),
            };
            let name = params::layer_key(l, layer::SCALE_W_IN);
            masks.insert(name.clone(), Mask::new(w_in.rows(), w_in.cols()));
            params.insert(name, w_in)?;
        }
    }
    for (name, mask) in masks.iter_mut() {
        let keep = match plan.freeze {
            FreezePolicy::AllOriginal => true,
            FreezePolicy::MetaStateOnly => {
                parse_layer_key(name).is_some_and(|(_, s)| layer::META_STATE.contains(&s))
            }
            FreezePolicy::None => false,
        };
        if !keep {
            mask.frozen.iter_mut().for_each(|f| *f = false);
        }
    }
    params::check_store(tgt, &params)?;
    Ok(Checkpoint { config: tgt.clone(), params, moments: None, masks: Some(masks) })
}

/// Outcome of running an original and a grown model side by side.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreservationReport {
    pub sequences: usize,
    pub positions: usize,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const PRESERVATION_TOLERANCE: f64 = 1e-6;

/// Largest logit difference over all positions of `sequences`.
pub fn verify_function_preservation(old: &Model<f64>, new: &Model<f64>, sequences: &[Vec<usize>]) -> Result<PreservationReport> {
    if old.config.vocab_size != new.config.vocab_size {
        return Err(Error::Contract(format!(
            "vocabularies differ: {} vs {}",
            old.config.vocab_size, new.config.vocab_size
        )));
    }
    let mut max = 0.0f64;
    let mut positions = 0;
    for seq in sequences {
        let (a, _) = old.forward(seq)?;
        let (b, _) = new.forward(seq)?;
        max = max.max(a.max_abs_diff(&b)?);
        positions += seq.len();
    }
    Ok(PreservationReport {
        sequences: sequences.len(),
        positions,
        max_abs_deviation: max,
        tolerance: PRESERVATION_TOLERANCE,
        pass: max <= PRESERVATION_TOLERANCE,
    })
}

/// Counts of frozen entries per tensor, for reporting.
pub fn frozen_summary(masks: &Masks) -> BTreeMap<String, (usize, usize)> {
    masks.iter().map(|(k, m)| (k.clone(), (m.frozen_count(), m.frozen.len()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expand_embeds_top_left() {
        let s = Tensor::<f64>::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = expand_state(&s, 3).unwrap();
        assert_eq!(e.data(), &[1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(e.frobenius_norm(), s.frobenius_norm());
        assert_eq!(expand_state(&s, 2).unwrap(), s);
        assert!(matches!(expand_state(&s, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn plan_rejects_head_change_and_shrink() {
        let cfg = ModelConfig::tiny();
        assert!(ScalePlan::new(&cfg, 96, 6).is_err());
        assert!(ScalePlan::new(&cfg, 32, 4).is_err());
        assert!(ScalePlan::new(&cfg, 66, 4).is_err());
        let p = ScalePlan::new(&cfg, 96, 4).unwrap();
        assert_eq!(p.target.origin_head_dim, Some(16));
        assert_eq!(p.channel(17), 25);
    }

    #[test]
    fn output_projection_shape_audit() {
        let cfg = ModelConfig::new(11, 16, 4, 1, crate::DType::F64).unwrap();
        let plan = ScalePlan::new(&cfg, 24, 4).unwrap();
        let w = Tensor::from_fn(16, 16, |r, c| (r * 16 + c) as f64 + 1.0);
        let e = extend_output_projection(&w, &plan, 0).unwrap();
        assert_eq!(e.shape(), (24, 24));
        // head 1's 4 × 16 block lands in rows 6..10
        assert_eq!(e.get(6, 0), w.get(4, 0));
        assert_eq!(e.get(10, 0), 0.0);
    }
}
