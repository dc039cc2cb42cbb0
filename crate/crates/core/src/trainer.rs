//! Offline policy-gradient training of one ranking agent per KV head.
//!
//! Each step draws one (trace, cache size) instance, samples K Gumbel-sort
//! permutations from the current scores, rewards each by its negated
//! oracle-normalized eviction cost, and follows the leave-one-out REINFORCE
//! gradient back through the scorer.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::attention::{future_importance_with, Aggregation, ImportanceVector};
use crate::checkpoint::{checkpoint_path, AgentCheckpoint};
use crate::error::{KvpError, Result};
use crate::nn::{
    adamw_step, clip_grad_norm, mlp_backward, mlp_forward, Activation, AdamWConfig, AdamWState, LrSchedule, MlpParams,
};
use crate::par::Exec;
use crate::policy::{
    apply_protection, featurize, input_dim, log_prob, sample_permutation, FeatureStats, Protection, Ranking,
    ScoringFeatures,
};
use crate::reward::{normalized_reward_with_oracle, oracle_ranking, total_cost, DEFAULT_EPS};
use crate::rng::{self, StreamRng};
use crate::trace::TraceSet;

pub const TRAIN_LOG_NAME: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    /// Episodes (sampled permutations) per step.
    pub episodes: usize,
    /// Also sets `schedule.total_steps`.
    pub total_steps: u64,
    pub schedule: LrSchedule,
    pub adamw: AdamWConfig,
    pub clip_norm: f64,
    pub min_cache_n: usize,
    pub min_future_f: usize,
    pub standardize_advantages: bool,
    pub hidden: usize,
    pub activation: Activation,
    pub aggregation: Aggregation,
    /// Protection applied to sampled rankings before rewarding them.
    pub train_protection: Option<Protection>,
    /// Traces used to estimate feature statistics.
    pub stats_traces: usize,
    pub log_every: u64,
    /// Resampling attempts for short or degenerate instances.
    pub max_resample: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            episodes: 8,
            total_steps: 4000,
            schedule: LrSchedule::default(),
            adamw: AdamWConfig::default(),
            clip_norm: 5.0,
            min_cache_n: 8,
            min_future_f: 1,
            standardize_advantages: true,
            hidden: 256,
            activation: Activation::GeluTanh,
            aggregation: Aggregation::Max,
            train_protection: None,
            stats_traces: 32,
            log_every: 50,
            max_resample: 64,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn with_steps(mut self, steps: u64) -> Self {
        self.total_steps = steps;
        self.schedule.total_steps = steps;
        if self.schedule.warmup_steps >= steps {
            self.schedule.warmup_steps = steps / 10;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes < 2 {
            return Err(KvpError::Config(format!("episodes = {} < 2; leave-one-out needs two", self.episodes)));
        }
        if self.min_cache_n == 0 || self.min_future_f == 0 {
            return Err(KvpError::Config("min_cache_n and min_future_f must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(KvpError::Config("hidden width must be >= 1".into()));
        }
        if self.total_steps > 0 {
            self.schedule.validate()?;
        }
        Ok(())
    }
}

/// One training example: a cache of the first `n` tokens of trace `trace_index`
/// and the following `f` tokens as future.
#[derive(Debug, Clone)]
pub struct TrainInstance {
    pub trace_index: usize,
    pub n: usize,
    pub f: usize,
    pub layer: usize,
    pub kv_head: usize,
    pub importance: ImportanceVector,
    pub features: ScoringFeatures,
    pub oracle_cost: f64,
}

impl TrainInstance {
    pub fn is_degenerate(&self) -> bool {
        self.oracle_cost <= DEFAULT_EPS
    }
}

/// Builds the instance for a fixed (trace, n) with `f` = the rest of the trace.
pub fn build_instance(
    traceset: &TraceSet,
    trace_index: usize,
    layer: usize,
    kv_head: usize,
    n: usize,
    stats: &FeatureStats,
    aggregation: Aggregation,
) -> Result<TrainInstance> {
    let trace = traceset.traces.get(trace_index).ok_or(KvpError::Bounds {
        what: "trace",
        index: trace_index,
        limit: traceset.len(),
    })?;
    let view = trace.head_view(layer, kv_head)?;
    let f =
        view.seq_len.checked_sub(n).filter(|&f| f > 0).ok_or(KvpError::Horizon { n, f: 1, seq_len: view.seq_len })?;
    let importance = future_importance_with(&view, n, f, aggregation)?;
    let oracle_cost = total_cost(&importance, &oracle_ranking(&importance))?;
    let features = featurize(&view, n, stats)?;
    Ok(TrainInstance { trace_index, n, f, layer, kv_head, importance, features, oracle_cost })
}

/// Draws a trace uniformly, then `n` uniformly from
/// `[min_cache_n, seq_len - min_future_f]`. Short traces and degenerate
/// instances are redrawn up to `max_resample` times.
pub fn sample_instance<R: Rng + ?Sized>(
    traceset: &TraceSet,
    layer: usize,
    kv_head: usize,
    stats: &FeatureStats,
    rng: &mut R,
    config: &TrainerConfig,
) -> Result<TrainInstance> {
    if traceset.is_empty() {
        return Err(KvpError::Data("empty trace set".into()));
    }
    let need = config.min_cache_n + config.min_future_f;
    if traceset.traces.iter().all(|t| t.seq_len() < need) {
        return Err(KvpError::Config(format!(
            "no trace reaches min_cache_n ({}) + min_future_f ({}) = {need} tokens",
            config.min_cache_n, config.min_future_f
        )));
    }
    for _ in 0..config.max_resample.max(1) {
        let j = rng.random_range(0..traceset.len());
        let len = traceset.traces[j].seq_len();
        if len < need {
            continue;
        }
        let n = rng.random_range(config.min_cache_n..=len - config.min_future_f);
        let inst = build_instance(traceset, j, layer, kv_head, n, stats, config.aggregation)?;
        if inst.is_degenerate() {
            continue;
        }
        return Ok(inst);
    }
    Err(KvpError::Config(format!(
        "no usable instance after {} draws (short or zero-importance traces)",
        config.max_resample
    )))
}

/// Leave-one-out advantages `r_k - mean(r_{k' != k})`, optionally
/// standardized to zero mean and unit deviation.
pub fn rloo_advantages(rewards: &[f64], standardize: bool) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(KvpError::Config(format!("{k} episodes; leave-one-out needs at least 2")));
    }
    let sum: f64 = rewards.iter().sum();
    let mut adv: Vec<f64> = rewards.iter().map(|&r| r - (sum - r) / (k - 1) as f64).collect();
    if standardize {
        let mean = adv.iter().sum::<f64>() / k as f64;
        let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / k as f64).sqrt();
        adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
    }
    Ok(adv)
}

/// Gradient of the surrogate loss `-(1/K) sum_k a_k log pi(sigma_k)` with
/// respect to the scores.
pub fn score_gradient(scores: &[f64], rankings: &[Ranking], advantages: &[f64]) -> Result<Vec<f64>> {
    if rankings.len() != advantages.len() {
        return Err(KvpError::Shape(format!("{} rankings, {} advantages", rankings.len(), advantages.len())));
    }
    let k = rankings.len() as f64;
    let mut grad = vec![0.0; scores.len()];
    for (ranking, &a) in rankings.iter().zip(advantages) {
        if a == 0.0 {
            continue;
        }
        let (_, g) = log_prob(scores, ranking)?;
        for (dst, gi) in grad.iter_mut().zip(g) {
            *dst -= a * gi / k;
        }
    }
    Ok(grad)
}

/// Parameters and optimizer state of one agent.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub params: MlpParams,
    pub opt: AdamWState,
}

impl AgentState {
    pub fn new(params: MlpParams, adamw: AdamWConfig) -> Self {
        let opt = AdamWState::new(&params, adamw);
        AgentState { params, opt }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub mean_reward: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Samples K permutations, rewards them, and applies one clipped AdamW
/// update. On a numeric failure the agent is left unchanged.
pub fn train_step<R: Rng + ?Sized>(
    agent: &mut AgentState,
    instance: &TrainInstance,
    rng: &mut R,
    config: &TrainerConfig,
    step: u64,
) -> Result<StepMetrics> {
    if instance.is_degenerate() {
        return Err(KvpError::Data("degenerate instance (oracle cost ~ 0)".into()));
    }
    let (scores, cache) = mlp_forward(&agent.params, &instance.features.x)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(KvpError::Numeric("non-finite scores".into()));
    }
    let mut rankings = Vec::with_capacity(config.episodes);
    let mut rewards = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        let sigma = sample_permutation(&scores, rng);
        let rewarded = match config.train_protection {
            Some(p) => apply_protection(&sigma, p),
            None => sigma.clone(),
        };
        let r = normalized_reward_with_oracle(&instance.importance, &rewarded, instance.oracle_cost, DEFAULT_EPS)?;
        rewards.push(r.normalized_reward);
        rankings.push(sigma);
    }
    let advantages = rloo_advantages(&rewards, config.standardize_advantages)?;
    let dscores = score_gradient(&scores, &rankings, &advantages)?;
    let mut grads = mlp_backward(&agent.params, &cache, &dscores)?;
    let grad_norm = clip_grad_norm(&mut grads, config.clip_norm);
    if !grad_norm.is_finite() {
        return Err(KvpError::Numeric("non-finite gradient norm".into()));
    }
    let lr = config.schedule.lr_at(step);
    adamw_step(&mut agent.opt, &mut agent.params, &grads, lr)?;
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(StepMetrics { mean_reward, grad_norm, lr })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: u64,
    pub layer: usize,
    pub head: usize,
    pub mean_reward: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct HeadOutcome {
    pub checkpoint: AgentCheckpoint,
    pub log: Vec<LogRecord>,
    /// Mean step reward over the last (up to) 50 steps; NaN with no steps.
    pub final_mean_reward: f64,
    pub aborted_steps: usize,
}

/// Statistics from every token of the first `stats_traces` traces.
pub fn estimate_stats(traceset: &TraceSet, layer: usize, kv_head: usize, max_traces: usize) -> Result<FeatureStats> {
    let (_, _, head_dim) = traceset.geometry().ok_or_else(|| KvpError::Data("empty trace set".into()))?;
    let views = traceset
        .traces
        .iter()
        .take(max_traces.max(1))
        .map(|t| t.head_view(layer, kv_head).map(|v| (v, v.seq_len)))
        .collect::<Result<Vec<_>>>()?;
    FeatureStats::estimate(views, head_dim)
}

fn check_head_data(traceset: &TraceSet, layer: usize, kv_head: usize) -> Result<()> {
    for (t, name) in traceset.traces.iter().zip(&traceset.names) {
        let v = t.head_view(layer, kv_head)?;
        if v.k.iter().chain(v.v).chain(v.q).any(|x| !x.is_finite()) {
            return Err(KvpError::Data(format!("{name}: non-finite values in layer {layer} head {kv_head}")));
        }
    }
    Ok(())
}

/// Trains the agent of one (layer, kv_head) for `config.total_steps` steps.
pub fn train_head(traceset: &TraceSet, layer: usize, kv_head: usize, config: &TrainerConfig) -> Result<HeadOutcome> {
    config.validate()?;
    check_head_data(traceset, layer, kv_head)?;
    let stats = estimate_stats(traceset, layer, kv_head, config.stats_traces)?;
    let in_dim = input_dim(stats.head_dim());
    let head_tag = [layer as u64, kv_head as u64];
    let params = MlpParams::init(in_dim, config.hidden, config.activation, rng::derive_seed(config.seed, &head_tag));
    let mut agent = AgentState::new(params, config.adamw.clone());

    let mut instance_rng = rng::stream(config.seed, &[layer as u64, kv_head as u64, 1]);
    let mut log = Vec::new();
    let mut recent = Vec::new();
    let mut aborted = 0;
    for step in 0..config.total_steps {
        let inst = sample_instance(traceset, layer, kv_head, &stats, &mut instance_rng, config)?;
        let mut episode_rng: StreamRng = rng::stream(config.seed, &[layer as u64, kv_head as u64, 2, step]);
        match train_step(&mut agent, &inst, &mut episode_rng, config, step) {
            Ok(m) => {
                recent.push(m.mean_reward);
                if recent.len() > 50 {
                    recent.remove(0);
                }
                if step % config.log_every.max(1) == 0 || step + 1 == config.total_steps {
                    log.push(LogRecord {
                        step,
                        layer,
                        head: kv_head,
                        mean_reward: m.mean_reward,
                        grad_norm: m.grad_norm,
                        lr: m.lr,
                    });
                }
            }
            Err(KvpError::Numeric(msg)) => {
                aborted += 1;
                log::warn!("layer {layer} head {kv_head} step {step} aborted: {msg}");
            }
            Err(e) => return Err(e),
        }
    }
    let final_mean_reward = if recent.is_empty() { f64::NAN } else { recent.iter().sum::<f64>() / recent.len() as f64 };
    let checkpoint = AgentCheckpoint::new(layer, kv_head, stats, agent.params)?;
    Ok(HeadOutcome { checkpoint, log, final_mean_reward, aborted_steps: aborted })
}

#[derive(Debug)]
pub struct HeadReport {
    pub layer: usize,
    pub kv_head: usize,
    pub result: Result<f64>,
}

/// Trains every listed head (all heads when `heads` is `None`), writes
/// `<out_dir>/layer_{L}/head_{H}.kvpa` for each success and the combined
/// step log, and reports per-head outcomes in head order.
pub fn train_all(
    traceset: &TraceSet,
    config: &TrainerConfig,
    heads: Option<&[(usize, usize)]>,
    exec: Exec,
    out_dir: &Path,
) -> Result<Vec<HeadReport>> {
    config.validate()?;
    let (n_layers, n_kv, _) = traceset.geometry().ok_or_else(|| KvpError::Data("empty trace set".into()))?;
    let all: Vec<(usize, usize)> = match heads {
        Some(h) => h.to_vec(),
        None => (0..n_layers).flat_map(|l| (0..n_kv).map(move |h| (l, h))).collect(),
    };
    fs::create_dir_all(out_dir)?;
    let outcomes = exec.map(&all, |&(layer, kv_head)| {
        let out = train_head(traceset, layer, kv_head, config)?;
        out.checkpoint.save(&checkpoint_path(out_dir, layer, kv_head))?;
        log::info!(
            "trained layer {layer} head {kv_head}: final mean reward {:.4} ({} aborted steps)",
            out.final_mean_reward,
            out.aborted_steps
        );
        Ok(out)
    });

    let mut w = BufWriter::new(File::create(out_dir.join(TRAIN_LOG_NAME))?);
    let mut reports = Vec::with_capacity(all.len());
    for (&(layer, kv_head), outcome) in all.iter().zip(outcomes) {
        match outcome {
            Ok(out) => {
                for rec in &out.log {
                    serde_json::to_writer(&mut w, rec).map_err(|e| KvpError::Io(e.into()))?;
                    w.write_all(b"\n")?;
                }
                reports.push(HeadReport { layer, kv_head, result: Ok(out.final_mean_reward) });
            }
            Err(e) => {
                log::error!("layer {layer} head {kv_head} failed: {e}");
                reports.push(HeadReport { layer, kv_head, result: Err(e) });
            }
        }
    }
    w.flush()?;
    Ok(reports)
}
