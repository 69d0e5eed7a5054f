//! `metastate`: train, evaluate, sample, grow, check and benchmark
//! meta-state models.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use metastate_core::bench::{self, ModelKind};
use metastate_core::checkpoint::Checkpoint;
use metastate_core::checks;
use metastate_core::corpus::{self, Corpus};
use metastate_core::scaling::{self, FreezePolicy, InitMode, Projection, ScalePlan};
use metastate_core::train::{self, TrainConfig, TrainIo};
use metastate_core::{DType, Error, Model, ModelConfig, Sampling};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "metastate", version, about = "Meta-state sequence models on byte-level text")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for initialization, batching and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Arithmetic precision.
    #[arg(long, global = true, value_parser = parse_dtype)]
    precision: Option<DType>,
    /// Model configuration as JSON; takes precedence over --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named configuration (tiny, mini, 150m, 450m, 900m, 1.5b).
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a text file, from scratch or from a checkpoint.
    Train(TrainArgs),
    /// Mean next-byte cross-entropy of a checkpoint.
    Eval(EvalArgs),
    /// Continue a prompt.
    Generate(GenerateArgs),
    /// Grow the head width of a checkpoint.
    Scale(ScaleArgs),
    /// Compare an original and a grown checkpoint on random prompts.
    VerifyScale(VerifyArgs),
    /// Run the invariant suite.
    Check,
    /// Time stateful inference against an attention baseline.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training text.
    #[arg(long)]
    corpus: PathBuf,
    /// Where to write the final checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint instead of initializing.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Line-delimited JSON metrics log.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Total optimizer steps counted from the start of the run.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_windows: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Start from the large-model hyperparameters instead of the desk ones.
    #[arg(long)]
    large_scale: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Which part of the split to score.
    #[arg(long, value_enum, default_value_t = Split::Valid)]
    split: Split,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 64)]
    max_windows: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Valid,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Sampling temperature; 0 picks the most likely byte.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlanKind {
    Zeros,
    Uniform,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProjectionKind {
    Identity,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FreezeKind {
    All,
    MetaState,
    None,
}

#[derive(Args, Debug)]
struct ScaleArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = PlanKind::Zeros)]
    plan: PlanKind,
    /// Target model width; the head count is kept.
    #[arg(long)]
    to_dim: usize,
    /// Half-width of the uniform plan.
    #[arg(long, default_value_t = 0.02)]
    scale: f64,
    #[arg(long, value_enum, default_value_t = ProjectionKind::Identity)]
    projection: ProjectionKind,
    #[arg(long, value_enum, default_value_t = FreezeKind::All)]
    freeze: FreezeKind,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    original: PathBuf,
    grown: PathBuf,
    #[arg(long, default_value_t = 10)]
    sequences: usize,
    #[arg(long, default_value_t = 32)]
    length: usize,
    /// Also print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated, strictly increasing sequence lengths.
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_LENGTHS.to_vec())]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = bench::DEFAULT_RUNS)]
    runs: usize,
    /// Write the CSV report here as well as to stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Benchmark the configuration from --preset/--config instead of the
    /// narrow default.
    #[arg(long)]
    use_config: bool,
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Global {
    fn explicit_config(&self) -> bool {
        self.config.is_some() || self.preset.is_some()
    }

    fn model_config(&self, default_precision: DType) -> anyhow::Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let cfg: ModelConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                cfg
            }
            None => ModelConfig::preset(self.preset.as_deref().unwrap_or("tiny"), default_precision)?,
        };
        cfg.precision = self.precision.unwrap_or(if self.config.is_some() { cfg.precision } else { default_precision });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Error>().is_some_and(|e| matches!(e, Error::Usage(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let g = &cli.global;
    match cli.command {
        Command::Train(a) => cmd_train(g, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Generate(a) => cmd_generate(g, a),
        Command::Scale(a) => cmd_scale(g, a),
        Command::VerifyScale(a) => cmd_verify(g, a),
        Command::Check => cmd_check(g),
        Command::Bench(a) => cmd_bench(g, a),
    }
}

fn cmd_train(g: &Global, a: TrainArgs) -> anyhow::Result<ExitCode> {
    let start = match &a.from {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if g.explicit_config() {
                let want = g.model_config(ckpt.config.precision)?;
                let same = want.d_model == ckpt.config.d_model
                    && want.n_heads == ckpt.config.n_heads
                    && want.n_layers == ckpt.config.n_layers
                    && want.vocab_size == ckpt.config.vocab_size;
                if !same {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint config {:?} does not match the requested {:?}",
                        ckpt.config, want
                    ))
                    .into());
                }
            }
            if let Some(p) = g.precision {
                if p != ckpt.config.precision {
                    return Err(Error::Checkpoint(format!("checkpoint is {:?}, --precision asks for {p:?}", ckpt.config.precision)).into());
                }
            }
            ckpt
        }
        None => {
            let cfg = g.model_config(DType::F32)?;
            match cfg.precision {
                DType::F32 => Checkpoint::from_model(&Model::<f32>::init(&cfg, g.seed)?),
                DType::F64 => Checkpoint::from_model(&Model::<f64>::init(&cfg, g.seed)?),
            }
        }
    };
    let base = if a.large_scale { TrainConfig::large_scale() } else { TrainConfig::desk() };
    let cfg = TrainConfig {
        lr: a.lr.unwrap_or(base.lr),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        seq_len: a.seq_len.unwrap_or(base.seq_len),
        steps: a.steps.unwrap_or(base.steps),
        seed: g.seed,
        eval_every: a.eval_every.unwrap_or(base.eval_every),
        eval_windows: a.eval_windows.unwrap_or(base.eval_windows),
        checkpoint_every: a.checkpoint_every.unwrap_or(base.checkpoint_every),
        ..base
    };
    let corpus = Corpus::load(&a.corpus)?;
    let mut log = match &a.metrics {
        Some(p) => Some(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    let io = TrainIo {
        metrics: log.as_mut().map(|w| w as &mut (dyn Write + Send)),
        checkpoint: Some(a.out.as_path()),
    };
    eprintln!(
        "training {} layers, width {}, {} heads, {:?}, {} steps on {} bytes (threads: {})",
        start.config.n_layers,
        start.config.d_model,
        start.config.n_heads,
        start.config.precision,
        cfg.steps,
        corpus.train.len(),
        train::thread_count()
    );
    let outcome = match start.config.precision {
        DType::F32 => train::train::<f32>(&start, &corpus, &cfg, io)?,
        DType::F64 => train::train::<f64>(&start, &corpus, &cfg, io)?,
    };
    if let Some(mut w) = log {
        w.flush()?;
    }
    println!(
        "steps {}  val_loss {:.4} -> {:.4}  checkpoint {}",
        outcome.checkpoint.moments.as_ref().map_or(0, |m| m.step),
        outcome.initial_val_loss,
        outcome.final_val_loss,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let corpus = Corpus::load(&a.corpus)?;
    let ids = match a.split {
        Split::Train => &corpus.train,
        Split::Valid => &corpus.valid,
    };
    let loss = train::evaluate_checkpoint(&ckpt, ids, a.seq_len, a.max_windows)?;
    println!("{loss:.6}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(g: &Global, a: GenerateArgs) -> anyhow::Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let sampling = Sampling::from_temperature(a.temperature)?;
    let prompt = corpus::encode(a.prompt.as_bytes());
    let out = match ckpt.config.precision {
        DType::F32 => ckpt.to_model::<f32>()?.generate(&prompt, a.steps, sampling, g.seed)?,
        DType::F64 => ckpt.to_model::<f64>()?.generate(&prompt, a.steps, sampling, g.seed)?,
    };
    println!("{}", corpus::decode(&out));
    Ok(ExitCode::SUCCESS)
}

fn cmd_scale(g: &Global, a: ScaleArgs) -> anyhow::Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let init = match a.plan {
        PlanKind::Zeros => InitMode::Zeros,
        PlanKind::Uniform => InitMode::Uniform(a.scale),
    };
    let projection = match a.projection {
        ProjectionKind::Identity => Projection::TruncatedIdentity,
        ProjectionKind::Random => Projection::Random,
    };
    let freeze = match a.freeze {
        FreezeKind::All => FreezePolicy::AllOriginal,
        FreezeKind::MetaState => FreezePolicy::MetaStateOnly,
        FreezeKind::None => FreezePolicy::None,
    };
    let plan = ScalePlan::new(&ckpt.config, a.to_dim, ckpt.config.n_heads)?
        .with_init(init)
        .with_projection(projection)
        .with_freeze(freeze);
    let grown = scaling::scale_checkpoint(&ckpt, &plan, g.seed)?;
    grown.save(&a.output)?;
    let frozen: usize = grown.masks.iter().flatten().map(|(_, m)| m.frozen_count()).sum();
    println!(
        "width {} -> {} (head {} -> {}), parameters {} -> {}, {frozen} entries frozen, wrote {}",
        plan.source.d_model,
        plan.target.d_model,
        plan.source.head_dim(),
        plan.target.head_dim(),
        ckpt.params.element_count(),
        grown.params.element_count(),
        a.output.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(g: &Global, a: VerifyArgs) -> anyhow::Result<ExitCode> {
    let old = Checkpoint::load(&a.original).with_context(|| format!("loading {}", a.original.display()))?;
    let new = Checkpoint::load(&a.grown).with_context(|| format!("loading {}", a.grown.display()))?;
    if a.length == 0 {
        return Err(Error::Usage("--length must be positive".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let vocab = old.config.vocab_size;
    let seqs: Vec<Vec<usize>> = (0..a.sequences).map(|_| (0..a.length).map(|_| rng.random_range(0..vocab)).collect()).collect();
    let report = scaling::verify_function_preservation(&old.to_model()?, &new.to_model()?, &seqs)?;
    println!(
        "{} max |logit deviation| {:.3e} over {} positions (tolerance {:.0e})",
        if report.pass { "PASS" } else { "FAIL" },
        report.max_abs_deviation,
        report.positions,
        report.tolerance
    );
    if a.json {
        println!("{}", serde_json::to_string(&report)?);
    }
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_check(g: &Global) -> anyhow::Result<ExitCode> {
    let cfg = g.model_config(DType::F64)?;
    let report = checks::run_suite(&cfg, g.seed);
    println!("{report}");
    Ok(if report.all_pass() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_bench(g: &Global, a: BenchArgs) -> anyhow::Result<ExitCode> {
    bench::validate_lengths(&a.lengths)?;
    let cfg = if a.use_config { g.model_config(DType::F32)? } else { bench::bench_config(g.precision.unwrap_or(DType::F32)) };
    let report = match cfg.precision {
        DType::F32 => bench::run::<f32>(&cfg, &a.lengths, a.runs, g.seed)?,
        DType::F64 => bench::run::<f64>(&cfg, &a.lengths, a.runs, g.seed)?,
    };
    print!("{}", report.to_table());
    println!();
    print!("{}", report.to_csv());
    if let Some(path) = &a.csv {
        write_file(path, report.to_csv().as_bytes())?;
    }
    if !report.constant_state(ModelKind::MetaState) {
        bail!("meta-state inference state size changed with sequence length");
    }
    Ok(ExitCode::SUCCESS)
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
