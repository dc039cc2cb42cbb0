//! Cost-per-budget curves, strategy comparison tables and latency timing.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::attention::{future_importance, ImportanceVector};
use crate::checkpoint::{checkpoint_path, AgentCheckpoint};
use crate::error::{KvpError, Result};
use crate::heuristics::{rank_with, Ranker, StrategySpec};
use crate::nn::{Activation, MlpParams};
use crate::par::Exec;
use crate::policy::{input_dim, FeatureStats, Protection, Ranking};
use crate::reward::{oracle_ranking, per_budget_costs, total_cost, DEFAULT_EPS};
use crate::synth::random_head;
use crate::trace::{HeadTraceView, TraceSet};

#[derive(Debug, Clone, PartialEq)]
pub enum BudgetGrid {
    /// Fractions of the cache size, each in (0, 1).
    Fractions(Vec<f64>),
    /// Absolute numbers of kept tokens.
    Absolute(Vec<usize>),
}

impl Default for BudgetGrid {
    /// 21 fractions from 0.05 to 0.95.
    fn default() -> Self {
        BudgetGrid::Fractions((0..21).map(|i| 0.05 + 0.045 * i as f64).collect())
    }
}

impl BudgetGrid {
    pub fn validate(&self) -> Result<()> {
        match self {
            BudgetGrid::Fractions(f) if f.iter().any(|&x| !(x > 0.0 && x < 1.0)) => {
                Err(KvpError::Validation("budget fractions must lie in (0, 1)".into()))
            }
            BudgetGrid::Absolute(b) if b.contains(&0) => {
                Err(KvpError::Validation("absolute budgets must be >= 1".into()))
            }
            BudgetGrid::Fractions(f) if f.is_empty() => Err(KvpError::Validation("empty budget grid".into())),
            BudgetGrid::Absolute(b) if b.is_empty() => Err(KvpError::Validation("empty budget grid".into())),
            _ => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BudgetGrid::Fractions(f) => f.len(),
            BudgetGrid::Absolute(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Kept-token counts for a cache of `n`, clamped to `[1, n - 1]`.
    pub fn budgets_for(&self, n: usize) -> Vec<usize> {
        let clamp = |b: usize| b.clamp(1, n.saturating_sub(1).max(1));
        match self {
            BudgetGrid::Fractions(f) => f.iter().map(|x| clamp((x * n as f64).round() as usize)).collect(),
            BudgetGrid::Absolute(b) => b.iter().map(|&x| clamp(x)).collect(),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            BudgetGrid::Fractions(f) => f.iter().map(|x| format!("{x:.3}")).collect(),
            BudgetGrid::Absolute(b) => b.iter().map(|x| x.to_string()).collect(),
        }
    }

    /// Parses `0.1,0.5` as fractions, or `abs:64,128` as absolute sizes.
    pub fn parse(s: &str) -> Result<Self> {
        let grid = if let Some(rest) = s.strip_prefix("abs:") {
            BudgetGrid::Absolute(
                rest.split(',')
                    .map(|x| x.trim().parse().map_err(|_| KvpError::Usage(format!("bad budget {x:?}"))))
                    .collect::<Result<_>>()?,
            )
        } else {
            BudgetGrid::Fractions(
                s.split(',')
                    .map(|x| x.trim().parse().map_err(|_| KvpError::Usage(format!("bad budget {x:?}"))))
                    .collect::<Result<_>>()?,
            )
        };
        grid.validate()?;
        Ok(grid)
    }
}

/// How each test trace is cut into cache and future.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSplit {
    pub cache_fraction: f64,
}

impl Default for EvalSplit {
    fn default() -> Self {
        EvalSplit { cache_fraction: 0.8 }
    }
}

impl EvalSplit {
    /// `(n, f)` for a trace of `seq_len` tokens.
    pub fn cut(&self, seq_len: usize) -> (usize, usize) {
        let n = ((self.cache_fraction * seq_len as f64).round() as usize).clamp(1, seq_len - 1);
        (n, seq_len - n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetCostCurve {
    pub strategy: String,
    pub layer: usize,
    pub kv_head: usize,
    pub budget_labels: Vec<String>,
    /// Mean of `cost_b / oracle_total_cost` over instances.
    pub mean_cost: Vec<f64>,
    pub stderr: Vec<f64>,
    pub instance_count: usize,
}

/// Normalized per-budget costs of one instance, plus its `C / C*`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCosts {
    pub trace_index: usize,
    pub costs: Vec<f64>,
    pub cost_ratio: f64,
}

struct Prepared<'a> {
    view: HeadTraceView<'a>,
    n: usize,
    importance: ImportanceVector,
    oracle_cost: f64,
}

fn prepare<'a>(
    traceset: &'a TraceSet,
    idx: usize,
    layer: usize,
    kv_head: usize,
    split: EvalSplit,
) -> Result<Option<Prepared<'a>>> {
    let view = traceset.traces[idx].head_view(layer, kv_head)?;
    let (n, f) = split.cut(view.seq_len);
    let importance = future_importance(&view, n, f)?;
    let oracle_cost = total_cost(&importance, &oracle_ranking(&importance))?;
    if oracle_cost <= DEFAULT_EPS {
        return Ok(None);
    }
    Ok(Some(Prepared { view, n, importance, oracle_cost }))
}

/// Ranks each test trace once and evaluates it at every grid budget.
/// Degenerate instances (zero oracle cost) are skipped.
#[allow(clippy::too_many_arguments)]
pub fn instance_costs(
    ranker: Ranker<'_>,
    traceset: &TraceSet,
    layer: usize,
    kv_head: usize,
    grid: &BudgetGrid,
    split: EvalSplit,
    protection: Option<Protection>,
    exec: Exec,
) -> Result<Vec<InstanceCosts>> {
    if traceset.is_empty() {
        return Err(KvpError::Data("empty test set".into()));
    }
    grid.validate()?;
    let idx: Vec<usize> = (0..traceset.len()).collect();
    let results = exec.map(&idx, |&i| -> Result<Option<InstanceCosts>> {
        let Some(p) = prepare(traceset, i, layer, kv_head, split)? else {
            return Ok(None);
        };
        let ranking = match ranker {
            // the oracle uses exactly the evaluation horizon
            Ranker::Oracle => oracle_ranking(&p.importance),
            other => rank_with(other, &p.view, p.n, protection)?,
        };
        Ok(Some(score_instance(i, &p, &ranking, grid)?))
    });
    Ok(results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

fn score_instance(i: usize, p: &Prepared<'_>, ranking: &Ranking, grid: &BudgetGrid) -> Result<InstanceCosts> {
    let per_budget = per_budget_costs(&p.importance, ranking)?;
    let costs = grid
        .budgets_for(p.n)
        .into_iter()
        .map(|b| per_budget.get(b - 1).copied().unwrap_or(0.0) / p.oracle_cost)
        .collect();
    let cost_ratio = total_cost(&p.importance, ranking)? / p.oracle_cost;
    Ok(InstanceCosts { trace_index: i, costs, cost_ratio })
}

#[allow(clippy::too_many_arguments)]
pub fn cost_curve(
    name: &str,
    ranker: Ranker<'_>,
    traceset: &TraceSet,
    layer: usize,
    kv_head: usize,
    grid: &BudgetGrid,
    split: EvalSplit,
    protection: Option<Protection>,
    exec: Exec,
) -> Result<BudgetCostCurve> {
    let inst = instance_costs(ranker, traceset, layer, kv_head, grid, split, protection, exec)?;
    if inst.is_empty() {
        return Err(KvpError::Data("every test instance is degenerate".into()));
    }
    let (mean_cost, stderr) = (0..grid.len()).map(|g| mean_stderr(inst.iter().map(|c| c.costs[g]))).unzip();
    Ok(BudgetCostCurve {
        strategy: name.to_string(),
        layer,
        kv_head,
        budget_labels: grid.labels(),
        mean_cost,
        stderr,
        instance_count: inst.len(),
    })
}

/// Mean `C / C*` over the non-degenerate instances.
pub fn mean_cost_ratio(
    ranker: Ranker<'_>,
    traceset: &TraceSet,
    layer: usize,
    kv_head: usize,
    split: EvalSplit,
    exec: Exec,
) -> Result<f64> {
    let grid = BudgetGrid::Fractions(vec![0.5]);
    let inst = instance_costs(ranker, traceset, layer, kv_head, &grid, split, None, exec)?;
    if inst.is_empty() {
        return Err(KvpError::Data("every test instance is degenerate".into()));
    }
    Ok(mean_stderr(inst.iter().map(|c| c.cost_ratio)).0)
}

/// Sequential f64 mean and standard error (sample deviation / sqrt(count)).
fn mean_stderr(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// One CSV row. Failed strategies carry `budget = "NA"` and NaN statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub strategy: String,
    pub layer: usize,
    pub head: usize,
    pub budget: String,
    pub mean_cost: f64,
    pub stderr: f64,
    pub instance_count: usize,
}

pub const CSV_HEADER: [&str; 7] = ["strategy", "layer", "head", "budget", "mean_cost", "stderr", "instance_count"];

#[derive(Debug, Clone, Default)]
pub struct CompareOptions<'a> {
    pub grid: BudgetGrid,
    pub split: EvalSplit,
    pub protection: Option<Protection>,
    pub agents_dir: Option<&'a Path>,
    pub exec: Exec,
    /// Optional directory for one gnuplot-style text file per curve.
    pub curves_dir: Option<&'a Path>,
}

/// Evaluates every strategy on every listed head. Rows come out in
/// (strategy, layer, head, budget) input order.
pub fn compare(
    strategies: &[StrategySpec],
    traceset: &TraceSet,
    heads: &[(usize, usize)],
    opts: &CompareOptions<'_>,
) -> Result<Vec<CompareRow>> {
    if traceset.is_empty() {
        return Err(KvpError::Data("empty test set".into()));
    }
    let mut rows = Vec::new();
    for spec in strategies {
        let name = spec.name();
        for &(layer, head) in heads {
            let curve = match spec {
                StrategySpec::Oracle => cost_curve(
                    &name,
                    Ranker::Oracle,
                    traceset,
                    layer,
                    head,
                    &opts.grid,
                    opts.split,
                    opts.protection,
                    opts.exec,
                ),
                StrategySpec::Heuristic(h) => cost_curve(
                    &name,
                    Ranker::Heuristic(h),
                    traceset,
                    layer,
                    head,
                    &opts.grid,
                    opts.split,
                    opts.protection,
                    opts.exec,
                ),
                StrategySpec::Learned => match opts.agents_dir {
                    None => Err(KvpError::Usage("learned strategy needs an agents directory".into())),
                    Some(dir) => AgentCheckpoint::load(&checkpoint_path(dir, layer, head)).and_then(|ck| {
                        cost_curve(
                            &name,
                            Ranker::Learned(&ck),
                            traceset,
                            layer,
                            head,
                            &opts.grid,
                            opts.split,
                            opts.protection,
                            opts.exec,
                        )
                    }),
                },
            };
            match curve {
                Ok(c) => {
                    if let Some(dir) = opts.curves_dir {
                        write_curve_text(&c, dir)?;
                    }
                    for (g, label) in c.budget_labels.iter().enumerate() {
                        rows.push(CompareRow {
                            strategy: name.clone(),
                            layer,
                            head,
                            budget: label.clone(),
                            mean_cost: c.mean_cost[g],
                            stderr: c.stderr[g],
                            instance_count: c.instance_count,
                        });
                    }
                }
                Err(e) => {
                    log::error!("{name} on layer {layer} head {head} failed: {e}");
                    rows.push(CompareRow {
                        strategy: name.clone(),
                        layer,
                        head,
                        budget: "NA".into(),
                        mean_cost: f64::NAN,
                        stderr: f64::NAN,
                        instance_count: 0,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> KvpError {
    KvpError::Io(std::io::Error::other(e))
}

/// `<dir>/<strategy>_L<layer>_H<head>.dat` with `budget mean stderr` columns.
pub fn write_curve_text(curve: &BudgetCostCurve, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let safe: String =
        curve.strategy.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect();
    let mut text = format!(
        "# strategy {}\n# layer {} head {} instances {}\n# budget mean_cost stderr\n",
        curve.strategy, curve.layer, curve.kv_head, curve.instance_count
    );
    for ((b, m), s) in curve.budget_labels.iter().zip(&curve.mean_cost).zip(&curve.stderr) {
        text.push_str(&format!("{b} {m:.6e} {s:.6e}\n"));
    }
    fs::write(dir.join(format!("{safe}_L{}_H{}.dat", curve.layer, curve.kv_head)), text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRecord {
    pub strategy: String,
    pub n: usize,
    pub repeat: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchGeometry {
    pub head_dim: usize,
    pub group: usize,
    pub hidden: usize,
}

impl Default for BenchGeometry {
    fn default() -> Self {
        BenchGeometry { head_dim: 128, group: 7, hidden: 256 }
    }
}

/// Times score + rank for one head on random K/V buffers of each size.
/// The learned strategy uses a freshly initialized agent; the oracle is not
/// timeable because it needs future tokens.
pub fn bench_latency(
    strategy: &StrategySpec,
    n_values: &[usize],
    repeat: usize,
    geom: BenchGeometry,
) -> Result<Vec<TimingRecord>> {
    let repeat = repeat.max(1);
    let learned = AgentCheckpoint::new(
        0,
        0,
        FeatureStats::identity(geom.head_dim),
        MlpParams::init(input_dim(geom.head_dim), geom.hidden, Activation::GeluTanh, 0xBE7C),
    )?;
    let mut out = Vec::new();
    for &n in n_values {
        let (k, v, q) = random_head(n, geom.head_dim, geom.group, n as u64);
        let view = HeadTraceView::from_slices(0, 0, n, geom.head_dim, geom.group, &k, &v, &q)?;
        let ranker = match strategy {
            StrategySpec::Oracle => {
                return Err(KvpError::Usage("the oracle cannot be timed without future tokens".into()))
            }
            StrategySpec::Learned => Ranker::Learned(&learned),
            StrategySpec::Heuristic(h) => Ranker::Heuristic(h),
        };
        let mut times = Vec::with_capacity(repeat);
        for _ in 0..repeat {
            let t0 = Instant::now();
            let r = rank_with(ranker, &view, n, None)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(r);
        }
        times.sort_by(f64::total_cmp);
        let pick = |q: f64| times[((q * (times.len() - 1) as f64).round() as usize).min(times.len() - 1)];
        out.push(TimingRecord { strategy: strategy.name(), n, repeat, median_ms: pick(0.5), p90_ms: pick(0.9) });
    }
    Ok(out)
}
