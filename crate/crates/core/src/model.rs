//! The full network: embedding, `L` layers of time mixing followed by the
//! meta-state layer, each wrapped in a pre-norm residual, then a final norm
//! and an untied output head.
//!
//! ```text
//! x_inter = x + TimeMix(norm1(x))
//! x_out   = x_inter + MetaState(norm2(x_inter), wkv_t)
//! ```
//!
//! The meta-state layer reads the WKV state after this step's update.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels::softmax_rows;
use crate::meta_state::{self, MetaStateParams};
use crate::norm::norm_forward;
use crate::params::{self, layer, layer_key, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::time_mix::{self, stream_layout, TimeMixParams};

/// Recurrent state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<F> {
    /// Normalized input of the previous token, used by the token shift.
    pub shift: Tensor<F>,
    /// `(H·n) × n` WKV states, head `h` in rows `[h·n, (h+1)·n)`.
    pub wkv: Tensor<F>,
    /// `(H·n) × n` meta-states.
    pub ms: Tensor<F>,
}

impl<F: Real> LayerState<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let n = cfg.head_dim();
        LayerState { shift: Tensor::zeros(1, d), wkv: Tensor::zeros(d, n), ms: Tensor::zeros(d, n) }
    }

    pub fn wkv_head(&self, h: usize) -> Tensor<F> {
        head_block(&self.wkv, h)
    }

    pub fn ms_head(&self, h: usize) -> Tensor<F> {
        head_block(&self.ms, h)
    }
}

fn head_block<F: Real>(stacked: &Tensor<F>, h: usize) -> Tensor<F> {
    let n = stacked.cols();
    stacked.slice(h * n, (h + 1) * n, 0, n).expect("head index in range")
}

fn stack_heads<F: Real>(heads: &[Tensor<F>]) -> Result<Tensor<F>> {
    Tensor::concat_rows(&heads.iter().collect::<Vec<_>>())
}

/// Everything carried between tokens during inference. Its size depends only
/// on the configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceState<F> {
    pub layers: Vec<LayerState<F>>,
}

impl<F: Real> InferenceState<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        InferenceState { layers: (0..cfg.n_layers).map(|_| LayerState::zeros(cfg)).collect() }
    }

    pub fn byte_size(&self) -> usize {
        let elems: usize = self.layers.iter().map(|l| l.shift.len() + l.wkv.len() + l.ms.len()).sum();
        elems * std::mem::size_of::<F>()
    }
}

/// Token selection during generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    /// Argmax, lowest index on ties.
    Greedy,
    /// Draw from `softmax(logits / temperature)`.
    Temperature(f64),
}

impl Sampling {
    /// Zero temperature means greedy decoding.
    pub fn from_temperature(t: f64) -> Result<Self> {
        if t == 0.0 {
            Ok(Sampling::Greedy)
        } else if t > 0.0 && t.is_finite() {
            Ok(Sampling::Temperature(t))
        } else {
            Err(Error::Input(format!("temperature must be positive, got {t}")))
        }
    }
}

/// Nodes of one recorded window.
pub struct Recorded {
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub norm1: Var,
    pub wkv: Var,
    pub ms: Var,
    pub inter: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        params::check_store(&config, &params)?;
        Ok(Model { config, params })
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Model { config: config.clone(), params: params::init_params(config, seed)? })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Records a window starting from `state` onto `g`.
    pub fn record(&self, g: &mut Graph<'_, F>, tokens: &[usize], state: &InferenceState<F>) -> Result<Recorded> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        if state.layers.len() != cfg.n_layers {
            return Err(Error::Contract(format!("state has {} layers, model {}", state.layers.len(), cfg.n_layers)));
        }
        let emb = g.param(params::EMBEDDING)?;
        let mut x = g.tape.gather(emb, tokens)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, ls) in state.layers.iter().enumerate() {
            let g1 = g.param(&layer_key(l, layer::LN1_GAMMA))?;
            let b1 = g.param(&layer_key(l, layer::LN1_BETA))?;
            let g2 = g.param(&layer_key(l, layer::LN2_GAMMA))?;
            let b2 = g.param(&layer_key(l, layer::LN2_BETA))?;
            let prev = g.input(ls.shift.clone());
            let wkv0 = g.input(ls.wkv.clone());
            let ms0 = g.input(ls.ms.clone());
            let norm1 = g.tape.norm(x, g1, b1, stream_layout(cfg))?;
            let tm = time_mix::record(g, cfg, l, norm1, prev, wkv0)?;
            let inter = g.tape.add(x, tm.out)?;
            let norm2 = g.tape.norm(inter, g2, b2, stream_layout(cfg))?;
            let ms = meta_state::record(g, cfg, l, norm2, &tm, ms0)?;
            let out = g.tape.add(inter, ms.out)?;
            layers.push(LayerTrace { norm1, wkv: tm.states, ms: ms.states, inter, out });
            x = out;
        }
        let go = g.param(params::LN_OUT_GAMMA)?;
        let bo = g.param(params::LN_OUT_BETA)?;
        let head = g.param(params::HEAD)?;
        let xn = g.tape.norm(x, go, bo, stream_layout(cfg))?;
        let logits = g.tape.matmul(xn, head)?;
        Ok(Recorded { logits, layers })
    }

    /// State after the last token of a recorded window.
    pub fn final_state(&self, g: &Graph<'_, F>, rec: &Recorded) -> InferenceState<F> {
        let d = self.config.d_model;
        let n = self.config.head_dim();
        let layers = rec
            .layers
            .iter()
            .map(|lt| {
                let norm1 = g.value(lt.norm1);
                let t = norm1.rows();
                let last = |v: Var| g.value(v).slice((t - 1) * d, t * d, 0, n).expect("window states");
                LayerState {
                    shift: norm1.slice(t - 1, t, 0, d).expect("window rows"),
                    wkv: last(lt.wkv),
                    ms: last(lt.ms),
                }
            })
            .collect();
        InferenceState { layers }
    }

    /// Logits for every position plus the state after the last token.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor<F>, InferenceState<F>)> {
        self.forward_with_state(tokens, &InferenceState::zeros(&self.config))
    }

    pub fn forward_with_state(&self, tokens: &[usize], state: &InferenceState<F>) -> Result<(Tensor<F>, InferenceState<F>)> {
        let mut g = Graph::new(&self.params);
        let rec = self.record(&mut g, tokens, state)?;
        let next = self.final_state(&g, &rec);
        Ok((g.value(rec.logits).clone(), next))
    }

    /// Consumes one token, returning its `1 × V` logits.
    pub fn step(&self, token: usize, state: &mut InferenceState<F>) -> Result<Tensor<F>> {
        let (logits, next) = self.forward_with_state(&[token], state)?;
        *state = next;
        Ok(logits)
    }

    /// Mean next-token cross-entropy of a window.
    pub fn loss(&self, inputs: &[usize], targets: &[usize]) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let rec = self.record(&mut g, inputs, &InferenceState::zeros(&self.config))?;
        let loss = g.tape.softmax_cross_entropy(rec.logits, targets)?;
        Ok(g.value(loss).get(0, 0).as_f64())
    }

    /// Loss and the gradient of every parameter.
    pub fn loss_and_grads(&self, inputs: &[usize], targets: &[usize]) -> Result<(f64, BTreeMap<String, Tensor<F>>)> {
        let mut g = Graph::new(&self.params);
        let rec = self.record(&mut g, inputs, &InferenceState::zeros(&self.config))?;
        let loss = g.tape.softmax_cross_entropy(rec.logits, targets)?;
        let value = g.value(loss).get(0, 0).as_f64();
        let grads = g.tape.backward(loss)?.params();
        Ok((value, grads))
    }

    /// One layer, one token, through the value-level reference functions.
    pub fn layer_forward(&self, l: usize, x: &Tensor<F>, state: &LayerState<F>) -> Result<(Tensor<F>, LayerState<F>)> {
        let cfg = &self.config;
        let get = |s: &str| self.params.get(&layer_key(l, s));
        let norm = |x: &Tensor<F>, g: &str, b: &str| norm_forward(x, get(g)?, get(b)?, &stream_layout(cfg));
        let tmp = TimeMixParams::from_store(&self.params, cfg, l)?;
        let msp = MetaStateParams::from_store(&self.params, cfg, l)?;
        let heads = cfg.n_heads;
        let wkv: Vec<_> = (0..heads).map(|h| state.wkv_head(h)).collect();
        let ms: Vec<_> = (0..heads).map(|h| state.ms_head(h)).collect();

        let x1 = norm(x, layer::LN1_GAMMA, layer::LN1_BETA)?;
        let tm = time_mix::time_mix_forward(&x1, &state.shift, &wkv, &tmp)?;
        let inter = x.add(&tm.out)?;
        let x2 = norm(&inter, layer::LN2_GAMMA, layer::LN2_BETA)?;
        let mst = meta_state::meta_state_layer(&x2, &tm.states, &ms, &tm.terms, &msp)?;
        let out = inter.add(&mst.out)?;
        Ok((out, LayerState { shift: x1, wkv: stack_heads(&tm.states)?, ms: stack_heads(&mst.states)? }))
    }

    /// One token through the value-level reference path.
    pub fn reference_step(&self, token: usize, state: &mut InferenceState<F>) -> Result<Tensor<F>> {
        self.check_tokens(&[token])?;
        let mut x = self.params.get(params::EMBEDDING)?.slice(token, token + 1, 0, self.config.d_model)?;
        for l in 0..self.config.n_layers {
            let (out, next) = self.layer_forward(l, &x, &state.layers[l])?;
            state.layers[l] = next;
            x = out;
        }
        let xn = norm_forward(
            &x,
            self.params.get(params::LN_OUT_GAMMA)?,
            self.params.get(params::LN_OUT_BETA)?,
            &stream_layout(&self.config),
        )?;
        xn.matmul(self.params.get(params::HEAD)?)
    }

    /// Continues `prompt` by `steps` tokens.
    pub fn generate(&self, prompt: &[usize], steps: usize, sampling: Sampling, seed: u64) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        let mut out = prompt.to_vec();
        if steps == 0 {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (logits, mut state) = self.forward(prompt)?;
        let mut last = logits.slice(logits.rows() - 1, logits.rows(), 0, logits.cols())?;
        for i in 0..steps {
            let next = pick(&last, sampling, &mut rng);
            out.push(next);
            if i + 1 < steps {
                last = self.step(next, &mut state)?;
            }
        }
        Ok(out)
    }
}

fn pick<F: Real, R: Rng>(logits: &Tensor<F>, sampling: Sampling, rng: &mut R) -> usize {
    match sampling {
        Sampling::Greedy => argmax(logits.data()),
        Sampling::Temperature(t) => {
            let scaled = logits.map(|v| v / F::of(t));
            let p = softmax_rows(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &pi) in p.data().iter().enumerate() {
                acc += pi.as_f64();
                if u < acc {
                    return i;
                }
            }
            p.len() - 1
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<F: Real>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
