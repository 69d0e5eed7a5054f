//! Sequence-length benchmark of stateful inference.
//!
//! For every length `T` both models consume `T` tokens one at a time from an
//! empty state. The reported time is the median of several runs after one
//! warm-up run, and the slope of `log(time)` against `log(T)` is fitted by
//! least squares per model kind.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baseline::{Baseline, BaselineConfig, KvCache};
use crate::config::{ModelConfig, BYTE_VOCAB};
use crate::error::{Error, Result};
use crate::model::{InferenceState, Model};
use crate::tensor::{DType, Real};

pub const DEFAULT_LENGTHS: &[usize] = &[256, 512, 1024, 2048];
pub const DEFAULT_RUNS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum ModelKind {
    #[serde(rename = "meta-state")]
    MetaState,
    #[serde(rename = "attention-baseline")]
    Attention,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::MetaState, ModelKind::Attention];

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::MetaState => "meta-state",
            ModelKind::Attention => "attention-baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub kind: ModelKind,
    #[serde(rename = "T")]
    pub t: usize,
    pub ms: f64,
    pub state_bytes: usize,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

/// Width small enough that attention over a long cache dominates the
/// per-token cost of the baseline.
pub fn bench_config(precision: DType) -> ModelConfig {
    let mut cfg = ModelConfig::new(BYTE_VOCAB, 16, 2, 2, precision).expect("valid bench config");
    cfg.preset = Some("bench".into());
    cfg
}

/// At least three strictly increasing positive lengths.
pub fn validate_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.len() < 3 {
        return Err(Error::Usage(format!("bench needs at least 3 lengths, got {}", lengths.len())));
    }
    if lengths[0] == 0 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage(format!("bench lengths must be positive and strictly increasing, got {lengths:?}")));
    }
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall time in milliseconds of `runs` calls after one warm-up, and
/// the value returned by the last call.
fn time_runs<T>(runs: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let mut last = f()?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        last = f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((median(times), last))
}

/// Benchmarks `cfg` and its parameter-matched attention baseline.
pub fn run<F: Real>(cfg: &ModelConfig, lengths: &[usize], runs: usize, seed: u64) -> Result<BenchReport> {
    validate_lengths(lengths)?;
    if runs == 0 {
        return Err(Error::Usage("bench needs at least one timed run".into()));
    }
    let model = Model::<F>::init(cfg, seed)?;
    let base_cfg = BaselineConfig::matched(cfg);
    let baseline = Baseline::<F>::init(&base_cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = *lengths.last().expect("validated");
    let tokens: Vec<usize> = (0..max).map(|_| rng.random_range(0..cfg.vocab_size)).collect();

    let mut rows = Vec::new();
    for &t in lengths {
        let seq = &tokens[..t];
        let (ms, bytes) = time_runs(runs, || {
            let mut state = InferenceState::zeros(cfg);
            for &tok in seq {
                model.step(tok, &mut state)?;
            }
            Ok(state.byte_size())
        })?;
        rows.push(row(ModelKind::MetaState, t, ms, bytes));
        let (ms, bytes) = time_runs(runs, || {
            let mut cache = KvCache::new(&base_cfg);
            for &tok in seq {
                baseline.step(tok, &mut cache)?;
            }
            Ok(cache.byte_size())
        })?;
        rows.push(row(ModelKind::Attention, t, ms, bytes));
    }
    Ok(BenchReport { rows })
}

fn row(kind: ModelKind, t: usize, ms: f64, state_bytes: usize) -> BenchRow {
    BenchRow { kind, t, ms, state_bytes, tokens_per_sec: t as f64 / (ms / 1e3) }
}

impl BenchReport {
    pub fn rows_of(&self, kind: ModelKind) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.kind == kind)
    }

    /// Fitted log-time against log-length slope.
    pub fn slope(&self, kind: ModelKind) -> f64 {
        let (t, ms): (Vec<f64>, Vec<f64>) = self.rows_of(kind).map(|r| (r.t as f64, r.ms)).unzip();
        log_log_slope(&t, &ms)
    }

    /// True when every row of `kind` reports the same state size.
    pub fn constant_state(&self, kind: ModelKind) -> bool {
        let mut sizes = self.rows_of(kind).map(|r| r.state_bytes);
        let first = sizes.next();
        sizes.all(|s| Some(s) == first)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,T,ms,state_bytes,tokens_per_sec\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.3},{},{:.1}", r.kind.tag(), r.t, r.ms, r.state_bytes, r.tokens_per_sec);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<20} {:>6} {:>12} {:>12} {:>14}\n", "kind", "T", "ms", "state_bytes", "tokens/sec");
        for r in &self.rows {
            let _ = writeln!(out, "{:<20} {:>6} {:>12.3} {:>12} {:>14.1}", r.kind.tag(), r.t, r.ms, r.state_bytes, r.tokens_per_sec);
        }
        for kind in ModelKind::ALL {
            let _ = writeln!(out, "slope {:<20} {:.3}", kind.tag(), self.slope(kind));
        }
        out
    }
}
