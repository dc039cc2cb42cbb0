//! `kvp` command line: gen-synthetic, train, eval, rank, bench, inspect.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::Aggregation;
use crate::checkpoint::{checkpoint_path, AgentCheckpoint};
use crate::error::{KvpError, Result};
use crate::eval::{bench_latency, compare, write_csv, BenchGeometry, BudgetGrid, CompareOptions, EvalSplit};
use crate::heuristics::{rank_with, Ranker, StrategySpec};
use crate::nn::{Activation, AdamWConfig, LrSchedule};
use crate::par::Exec;
use crate::policy::Protection;
use crate::synth::{gen_traceset, Archetype, SynthSpec};
use crate::trace::{load_trace, Manifest, SplitFilter, TraceSet, TRACE_MAGIC};
use crate::trainer::{train_all, TrainerConfig};

#[derive(Debug, Parser)]
#[command(name = "kvp", about = "Train and evaluate learned KV-cache eviction rankers", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trace set with planted attention structure
    GenSynthetic(GenArgs),
    /// Train one ranking agent per (layer, kv_head)
    Train(TrainArgs),
    /// Compare strategies by cost-per-budget curves (CSV)
    Eval(EvalArgs),
    /// Rank one trace's cache and print per-budget keep-sets
    Rank(RankArgs),
    /// Time scoring + ranking for a single head on random buffers
    Bench(BenchArgs),
    /// Print a trace header
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ArchetypeArg {
    Sink,
    Recency,
    Content,
    Mixed,
}

impl From<ArchetypeArg> for Archetype {
    fn from(a: ArchetypeArg) -> Self {
        match a {
            ArchetypeArg::Sink => Archetype::Sink,
            ArchetypeArg::Recency => Archetype::Recency,
            ArchetypeArg::Content => Archetype::Content,
            ArchetypeArg::Mixed => Archetype::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActivationArg {
    GeluTanh,
    GeluErf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    Max,
    Mean,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "content")]
    pub archetype: ArchetypeArg,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 32)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub n_q_heads: usize,
    #[arg(long, default_value_t = 1)]
    pub n_kv_heads: usize,
    #[arg(long, default_value_t = 4.0)]
    pub signal_strength: f64,
    #[arg(long, default_value_t = 0.1)]
    pub important_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    /// key=value spec file; command-line seed and out still apply
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// 0 = all cores, 1 = sequential
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct HeadSelection {
    /// Comma-separated layers (default: all)
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Comma-separated KV heads (default: all)
    #[arg(long, value_delimiter = ',')]
    pub kv_heads: Vec<usize>,
}

impl HeadSelection {
    fn resolve(&self, n_layers: usize, n_kv: usize) -> Result<Vec<(usize, usize)>> {
        let layers: Vec<usize> = if self.layers.is_empty() { (0..n_layers).collect() } else { self.layers.clone() };
        let heads: Vec<usize> = if self.kv_heads.is_empty() { (0..n_kv).collect() } else { self.kv_heads.clone() };
        if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
            return Err(KvpError::Bounds { what: "layer", index: l, limit: n_layers });
        }
        if let Some(&h) = heads.iter().find(|&&h| h >= n_kv) {
            return Err(KvpError::Bounds { what: "kv_head", index: h, limit: n_kv });
        }
        Ok(layers.iter().flat_map(|&l| heads.iter().map(move |&h| (l, h))).collect())
    }
}

#[derive(Debug, Args)]
pub struct ProtectArgs {
    /// Always keep the first/last tokens (see --protect-prefix/--protect-suffix)
    #[arg(long)]
    pub protect: bool,
    #[arg(long, default_value_t = 4)]
    pub protect_prefix: usize,
    #[arg(long, default_value_t = 16)]
    pub protect_suffix: usize,
}

impl ProtectArgs {
    fn get(&self) -> Option<Protection> {
        self.protect.then_some(Protection { prefix: self.protect_prefix, suffix: self.protect_suffix })
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Trace directory or manifest file
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Checkpoint root (default: <traces dir>/agents)
    #[arg(long)]
    pub agents: Option<PathBuf>,
    #[arg(long, default_value_t = 4000)]
    pub steps: u64,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: u64,
    #[arg(long, default_value_t = 0.01)]
    pub warmup_start: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub final_lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 8)]
    pub episodes: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, value_enum, default_value = "gelu-tanh")]
    pub activation: ActivationArg,
    #[arg(long, value_enum, default_value = "max")]
    pub aggregation: AggregationArg,
    #[arg(long, default_value_t = 8)]
    pub min_cache: usize,
    #[arg(long, default_value_t = 1)]
    pub min_future: usize,
    /// Use raw leave-one-out advantages
    #[arg(long)]
    pub no_standardize: bool,
    /// Apply protection to sampled rankings during training too
    #[arg(long)]
    pub train_protect: bool,
    #[arg(long, default_value_t = 4)]
    pub protect_prefix: usize,
    #[arg(long, default_value_t = 16)]
    pub protect_suffix: usize,
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
    #[command(flatten)]
    pub heads: HeadSelection,
    /// 0 = all cores, 1 = sequential
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub traces: PathBuf,
    /// e.g. kvp,random,snapkv:pool_kernel=5,oracle
    #[arg(long, default_value = "oracle,kvp,random,streaming_llm")]
    pub strategies: String,
    /// Checkpoint root (default: <traces dir>/agents)
    #[arg(long)]
    pub agents: Option<PathBuf>,
    /// CSV path (default: <traces dir>/eval.csv)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fractions like 0.1,0.5 or absolute sizes abs:64,128 (default: 21 fractions 0.05..0.95)
    #[arg(long)]
    pub budgets: Option<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0.8)]
    pub cache_fraction: f64,
    /// Also write one gnuplot-style .dat file per curve here
    #[arg(long)]
    pub curves_dir: Option<PathBuf>,
    #[command(flatten)]
    pub protect: ProtectArgs,
    #[command(flatten)]
    pub heads: HeadSelection,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub strategy: String,
    /// Cache size (default: whole trace minus one token)
    #[arg(long)]
    pub n: Option<usize>,
    /// Print only this budget's keep-set
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub kv_head: usize,
    /// Checkpoint root for the learned strategy
    #[arg(long, default_value = "agents")]
    pub agents: PathBuf,
    #[command(flatten)]
    pub protect: ProtectArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "kvp,knorm,streaming_llm,tova")]
    pub strategies: String,
    #[arg(long, value_delimiter = ',', default_value = "1000,10000")]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    pub repeat: usize,
    #[arg(long, default_value_t = 128)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 7)]
    pub group: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    /// Optional CSV output
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub trace: PathBuf,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("KVP_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging();
    let mut out = std::io::stdout().lock();
    match dispatch(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn dispatch<W: Write>(cmd: Command, out: &mut W) -> Result<()> {
    match cmd {
        Command::GenSynthetic(a) => cmd_gen(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Rank(a) => cmd_rank(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    }
}

fn traces_root(traces: &Path) -> PathBuf {
    let manifest = Manifest::resolve_path(traces);
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn cmd_gen<W: Write>(a: GenArgs, out: &mut W) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => SynthSpec::from_config(&fs::read_to_string(p)?)?,
        None => SynthSpec {
            archetype: a.archetype.into(),
            seq_len: a.seq_len,
            head_dim: a.head_dim,
            n_layers: a.n_layers,
            n_q_heads: a.n_q_heads,
            n_kv_heads: a.n_kv_heads,
            signal_strength: a.signal_strength,
            important_fraction: a.important_fraction,
            noise_std: a.noise_std,
            seed: a.seed,
        },
    };
    spec.seed = a.seed;
    let manifest = gen_traceset(&spec, a.count, &a.out, Exec::from_workers(a.workers))?;
    writeln!(out, "wrote {} traces; manifest {}", a.count, manifest.display())?;
    Ok(())
}

fn cmd_train<W: Write>(a: TrainArgs, out: &mut W) -> Result<()> {
    let traceset = TraceSet::load(&a.traces, SplitFilter::Train)?;
    let (n_layers, n_kv, _) = traceset.geometry().ok_or_else(|| KvpError::Data("no training traces".into()))?;
    let heads = a.heads.resolve(n_layers, n_kv)?;
    let agents = a.agents.clone().unwrap_or_else(|| traces_root(&a.traces).join("agents"));
    let config = TrainerConfig {
        episodes: a.episodes,
        total_steps: a.steps,
        schedule: LrSchedule {
            base_lr: a.lr,
            warmup_steps: a.warmup,
            warmup_start_factor: a.warmup_start,
            final_lr: a.final_lr,
            total_steps: a.steps,
        },
        adamw: AdamWConfig { weight_decay: a.weight_decay, ..Default::default() },
        clip_norm: a.clip,
        min_cache_n: a.min_cache,
        min_future_f: a.min_future,
        standardize_advantages: !a.no_standardize,
        hidden: a.hidden,
        activation: match a.activation {
            ActivationArg::GeluTanh => Activation::GeluTanh,
            ActivationArg::GeluErf => Activation::GeluErf,
        },
        aggregation: match a.aggregation {
            AggregationArg::Max => Aggregation::Max,
            AggregationArg::Mean => Aggregation::Mean,
        },
        train_protection: a.train_protect.then_some(Protection { prefix: a.protect_prefix, suffix: a.protect_suffix }),
        log_every: a.log_every,
        seed: a.seed,
        ..Default::default()
    };
    let reports = train_all(&traceset, &config, Some(&heads), Exec::from_workers(a.workers), &agents)?;
    let mut failed = 0;
    for r in &reports {
        match &r.result {
            Ok(reward) => writeln!(out, "layer {} head {}: done, final mean reward {reward:.4}", r.layer, r.kv_head)?,
            Err(e) => {
                failed += 1;
                writeln!(out, "layer {} head {}: FAILED: {e}", r.layer, r.kv_head)?;
            }
        }
    }
    writeln!(out, "checkpoints in {}", agents.display())?;
    if failed > 0 {
        return Err(KvpError::Data(format!("{failed} of {} heads failed", reports.len())));
    }
    Ok(())
}

fn cmd_eval<W: Write>(a: EvalArgs, out: &mut W) -> Result<()> {
    let strategies = StrategySpec::parse_list(&a.strategies)?;
    if strategies.is_empty() {
        return Err(KvpError::Usage("no strategies given".into()));
    }
    let split: SplitFilter = a.split.parse()?;
    if !(a.cache_fraction > 0.0 && a.cache_fraction < 1.0) {
        return Err(KvpError::Validation("--cache-fraction must lie in (0, 1)".into()));
    }
    let traceset = TraceSet::load(&a.traces, split)?;
    let (n_layers, n_kv, _) =
        traceset.geometry().ok_or_else(|| KvpError::Data(format!("no traces in the {} split", a.split)))?;
    let heads = a.heads.resolve(n_layers, n_kv)?;
    let root = traces_root(&a.traces);
    let agents = a.agents.clone().unwrap_or_else(|| root.join("agents"));
    let csv_path = a.out.clone().unwrap_or_else(|| root.join("eval.csv"));
    let grid = match &a.budgets {
        Some(s) => BudgetGrid::parse(s)?,
        None => BudgetGrid::default(),
    };
    let opts = CompareOptions {
        grid,
        split: EvalSplit { cache_fraction: a.cache_fraction },
        protection: a.protect.get(),
        agents_dir: Some(&agents),
        exec: Exec::from_workers(a.workers),
        curves_dir: a.curves_dir.as_deref(),
    };
    let rows = compare(&strategies, &traceset, &heads, &opts)?;
    write_csv(&rows, &csv_path)?;
    let failed = rows.iter().filter(|r| r.budget == "NA").count();
    writeln!(
        out,
        "wrote {} rows for {} strategies to {}{}",
        rows.len(),
        strategies.len(),
        csv_path.display(),
        if failed > 0 { format!(" ({failed} failed)") } else { String::new() }
    )?;
    Ok(())
}

fn cmd_rank<W: Write>(a: RankArgs, out: &mut W) -> Result<()> {
    let trace = load_trace(&a.trace)?;
    let view = trace.head_view(a.layer, a.kv_head)?;
    let n = a.n.unwrap_or(view.seq_len - 1);
    if n == 0 || n > view.seq_len {
        return Err(KvpError::Bounds { what: "n", index: n, limit: view.seq_len });
    }
    let spec: StrategySpec = a.strategy.parse()?;
    let ckpt;
    let ranker = match &spec {
        StrategySpec::Oracle => Ranker::Oracle,
        StrategySpec::Heuristic(h) => Ranker::Heuristic(h),
        StrategySpec::Learned => {
            ckpt = AgentCheckpoint::load(&checkpoint_path(&a.agents, a.layer, a.kv_head))?;
            Ranker::Learned(&ckpt)
        }
    };
    let ranking = rank_with(ranker, &view, n, a.protect.get())?;
    let join = |xs: &[usize], sep: &str| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep);
    writeln!(out, "strategy {} layer {} head {} n {n}", spec.name(), a.layer, a.kv_head)?;
    writeln!(out, "ranking: {}", join(ranking.order(), " "))?;
    let budgets: Vec<usize> = match a.budget {
        Some(b) if b == 0 || b > n => return Err(KvpError::Budget { budget: b, max: n }),
        Some(b) => vec![b],
        None => (1..n).collect(),
    };
    for b in budgets {
        writeln!(out, "keep[{b}]: {{{}}}", join(ranking.keep_set(b), ","))?;
    }
    Ok(())
}

fn cmd_bench<W: Write>(a: BenchArgs, out: &mut W) -> Result<()> {
    let strategies = StrategySpec::parse_list(&a.strategies)?;
    let geom = BenchGeometry { head_dim: a.head_dim, group: a.group, hidden: a.hidden };
    let mut records = Vec::new();
    writeln!(out, "{:<40} {:>8} {:>12} {:>12}", "strategy", "n", "median_ms", "p90_ms")?;
    for s in &strategies {
        for r in bench_latency(s, &a.n, a.repeat, geom)? {
            writeln!(out, "{:<40} {:>8} {:>12.4} {:>12.4}", r.strategy, r.n, r.median_ms, r.p90_ms)?;
            records.push(r);
        }
    }
    if let Some(p) = &a.out {
        let mut w = csv::Writer::from_path(p).map_err(|e| KvpError::Io(std::io::Error::other(e)))?;
        for r in &records {
            w.serialize(r).map_err(|e| KvpError::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_inspect<W: Write>(a: InspectArgs, out: &mut W) -> Result<()> {
    let trace = load_trace(&a.trace)?;
    let h = trace.header();
    writeln!(out, "magic {}", String::from_utf8_lossy(&TRACE_MAGIC))?;
    writeln!(out, "version {}", h.version)?;
    writeln!(out, "n_layers {}", h.n_layers)?;
    writeln!(out, "n_q_heads {}", h.n_q_heads)?;
    writeln!(out, "n_kv_heads {}", h.n_kv_heads)?;
    writeln!(out, "head_dim {}", h.head_dim)?;
    writeln!(out, "seq_len {}", h.seq_len)?;
    writeln!(out, "flags 0x{:08x}", h.flags)?;
    writeln!(out, "group_size {}", h.group_size())?;
    writeln!(out, "token_ids {}", if h.has_token_ids() { "present" } else { "absent" })?;
    writeln!(out, "file_bytes {}", h.file_bytes())?;
    Ok(())
}
