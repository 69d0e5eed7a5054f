//! Training and evaluation over contiguous byte windows.
//!
//! Every window starts from a zero state. The windows of step `s` are drawn
//! from a generator seeded by `(seed, s)`, so a run resumed from a checkpoint
//! sees exactly the batches the uninterrupted run would have seen.
//! Per-window gradients are computed on a worker pool and summed in window
//! order, which keeps results independent of the thread count.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{clip_global_norm, mask_grads, Adam, AdamConfig, Grads};
use crate::tensor::Real;

/// Environment variable naming the worker count for training.
pub const THREADS_ENV: &str = "METASTATE_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Total optimizer steps, counted from the start of the run.
    pub steps: u64,
    pub seed: u64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Validate every this many steps (0 disables periodic validation).
    pub eval_every: u64,
    /// Cap on validation windows.
    pub eval_windows: usize,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            seq_len: 128,
            steps: 2000,
            seed: 0,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 200,
            eval_windows: 64,
            checkpoint_every: 0,
        }
    }

    /// Hyperparameters used for the large presets.
    pub fn large_scale() -> Self {
        TrainConfig { lr: 1e-4, batch_size: 64, seq_len: 1024, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.lr > 0.0 && self.clip > 0.0 && self.adam_eps > 0.0;
        let betas = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !positive || !betas || self.batch_size == 0 || self.seq_len == 0 || self.eval_windows == 0 {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub elapsed: f64,
}

/// Where a run writes its side outputs.
#[derive(Default)]
pub struct TrainIo<'a> {
    pub metrics: Option<&'a mut (dyn Write + Send)>,
    pub checkpoint: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

/// Windows of `len + 1` tokens for step `step`.
pub fn sample_windows(ids: &[usize], len: usize, count: usize, seed: u64, step: u64) -> Result<Vec<&[usize]>> {
    if ids.len() < len + 1 {
        return Err(Error::Input(format!("{} tokens cannot fill a window of {}", ids.len(), len + 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    Ok((0..count)
        .map(|_| {
            let start = rng.random_range(0..=ids.len() - len - 1);
            &ids[start..start + len + 1]
        })
        .collect())
}

/// Mean loss and gradients over a batch of windows.
pub fn batch_grads<F: Real>(model: &Model<F>, windows: &[&[usize]]) -> Result<(f64, Grads<F>)> {
    let per: Vec<(f64, Grads<F>)> = windows
        .par_iter()
        .map(|w| model.loss_and_grads(&w[..w.len() - 1], &w[1..]))
        .collect::<Result<_>>()?;
    let scale = F::of(1.0 / windows.len() as f64);
    let mut iter = per.into_iter();
    let (mut loss, mut total) = iter.next().ok_or_else(|| Error::Contract("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (name, t) in g {
            total.get_mut(&name).expect("same parameters").add_assign(&t);
        }
    }
    for t in total.values_mut() {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss / windows.len() as f64, total))
}

/// Position-weighted mean loss over consecutive windows of `ids`, each
/// starting from a zero state, at most `max_windows` of them.
pub fn evaluate<F: Real>(model: &Model<F>, ids: &[usize], seq_len: usize, max_windows: usize) -> Result<f64> {
    if ids.len() < 2 {
        return Err(Error::Input("evaluation needs at least two tokens".into()));
    }
    let windows: Vec<&[usize]> = ids.chunks(seq_len + 1).filter(|w| w.len() >= 2).take(max_windows).collect();
    let losses: Vec<(f64, usize)> = windows
        .par_iter()
        .map(|w| Ok((model.loss(&w[..w.len() - 1], &w[1..])?, w.len() - 1)))
        .collect::<Result<_>>()?;
    let total: usize = losses.iter().map(|l| l.1).sum();
    Ok(losses.iter().map(|(l, n)| l * *n as f64).sum::<f64>() / total as f64)
}

/// Worker count from the environment, defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Trains from `start` until `cfg.steps`, resuming from the step recorded in
/// its optimizer moments.
pub fn train<F: Real>(start: &Checkpoint, corpus: &Corpus, cfg: &TrainConfig, io: TrainIo<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if start.config.precision != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision {:?} does not match the requested {:?}",
            start.config.precision,
            F::DTYPE
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    pool.install(|| run::<F>(start, corpus, cfg, io))
}

fn run<F: Real>(start: &Checkpoint, corpus: &Corpus, cfg: &TrainConfig, mut io: TrainIo<'_>) -> Result<TrainOutcome> {
    let mut model = start.to_model::<F>()?;
    let mut adam = match &start.moments {
        Some(mo) => Adam::from_moments(cfg.adam(), mo, &model.params)?,
        None => Adam::new(cfg.adam(), &model.params),
    };
    let masks = start.masks.clone();
    let clock = Instant::now();
    let eval = |m: &Model<F>| evaluate(m, &corpus.valid, cfg.seq_len, cfg.eval_windows);
    let initial_val_loss = eval(&model)?;
    let mut metrics = Vec::new();
    let mut last_val = initial_val_loss;
    while adam.step < cfg.steps {
        let step = adam.step;
        let windows = sample_windows(&corpus.train, cfg.seq_len, cfg.batch_size, cfg.seed, step)?;
        let (loss, mut grads) = batch_grads(&model, &windows)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step} is {loss}")));
        }
        if let Some(m) = &masks {
            mask_grads(&mut grads, m);
        }
        clip_global_norm(&mut grads, cfg.clip);
        adam.update(&mut model.params, &grads, masks.as_ref())?;
        let done = adam.step;
        let val_loss = if done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            last_val = eval(&model)?;
            Some(last_val)
        } else {
            None
        };
        let rec = MetricsRecord { step: done, loss, val_loss, lr: cfg.lr, elapsed: clock.elapsed().as_secs_f64() };
        if let Some(w) = io.metrics.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w)?;
        }
        metrics.push(rec);
        if let Some(path) = io.checkpoint {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.steps {
                snapshot(&model, &adam, &masks).save(path)?;
            }
        }
    }
    let checkpoint = snapshot(&model, &adam, &masks);
    if let Some(path) = io.checkpoint {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome { checkpoint, metrics, initial_val_loss, final_val_loss: last_val })
}

fn snapshot<F: Real>(model: &Model<F>, adam: &Adam<F>, masks: &Option<crate::checkpoint::Masks>) -> Checkpoint {
    let mut c = Checkpoint::from_model(model);
    c.moments = Some(adam.moments());
    c.masks = masks.clone();
    c
}

/// Mean loss of a checkpoint on `ids`; parameters are not touched.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, ids: &[usize], seq_len: usize, max_windows: usize) -> Result<f64> {
    match ckpt.config.precision {
        crate::DType::F32 => evaluate(&ckpt.to_model::<f32>()?, ids, seq_len, max_windows),
        crate::DType::F64 => evaluate(&ckpt.to_model::<f64>()?, ids, seq_len, max_windows),
    }
}
