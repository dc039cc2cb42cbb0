//! Baseline rankers. Each heuristic turns its keep/evict rule into a score
//! per cached token; [`rank_with`] sorts those scores with the same
//! tie-breaking and protection used for the learned agent.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{future_importance, gqa_row};
use crate::checkpoint::AgentCheckpoint;
use crate::error::{KvpError, Result};
use crate::policy::{apply_protection, deterministic_ranking, Protection, Ranking};
use crate::reward::oracle_ranking;
use crate::rng;
use crate::trace::HeadTraceView;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeuristicKind {
    Random,
    StreamingLlm,
    KNorm,
    KeyDiff,
    LagKv,
    Tova,
    SnapKv,
}

impl HeuristicKind {
    pub const ALL: [HeuristicKind; 7] = [
        HeuristicKind::Random,
        HeuristicKind::StreamingLlm,
        HeuristicKind::KNorm,
        HeuristicKind::KeyDiff,
        HeuristicKind::LagKv,
        HeuristicKind::Tova,
        HeuristicKind::SnapKv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeuristicKind::Random => "random",
            HeuristicKind::StreamingLlm => "streaming_llm",
            HeuristicKind::KNorm => "knorm",
            HeuristicKind::KeyDiff => "keydiff",
            HeuristicKind::LagKv => "lagkv",
            HeuristicKind::Tova => "tova",
            HeuristicKind::SnapKv => "snapkv",
        }
    }

    /// Whether the kind reads query vectors.
    pub fn uses_attention(self) -> bool {
        matches!(self, HeuristicKind::Tova | HeuristicKind::SnapKv)
    }
}

impl FromStr for HeuristicKind {
    type Err = KvpError;

    fn from_str(s: &str) -> Result<Self> {
        HeuristicKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| KvpError::Usage(format!("unknown heuristic {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HeuristicSpec {
    pub kind: HeuristicKind,
    pub sink_count: usize,
    pub observation_window: usize,
    pub pool_kernel: usize,
    pub lag_partition: usize,
    pub seed: u64,
}

impl HeuristicSpec {
    pub fn new(kind: HeuristicKind) -> Self {
        HeuristicSpec { kind, sink_count: 4, observation_window: 32, pool_kernel: 7, lag_partition: 64, seed: 0 }
    }

    fn set(&mut self, key: &str, val: &str) -> Result<()> {
        let num = || -> Result<u64> {
            val.parse().map_err(|_| KvpError::Usage(format!("{key}={val:?} is not a non-negative integer")))
        };
        match key {
            "sink_count" => self.sink_count = num()? as usize,
            "observation_window" => self.observation_window = num()? as usize,
            "pool_kernel" => self.pool_kernel = num()? as usize,
            "lag_partition" => self.lag_partition = num()? as usize,
            "seed" => self.seed = num()?,
            other => return Err(KvpError::Usage(format!("unknown heuristic parameter {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.observation_window == 0 || self.pool_kernel == 0 || self.lag_partition == 0 {
            return Err(KvpError::Validation("heuristic window parameters must be positive".into()));
        }
        Ok(())
    }
}

impl fmt::Display for HeuristicSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = HeuristicSpec::new(self.kind);
        let mut parts = Vec::new();
        if self.sink_count != d.sink_count {
            parts.push(format!("sink_count={}", self.sink_count));
        }
        if self.observation_window != d.observation_window {
            parts.push(format!("observation_window={}", self.observation_window));
        }
        if self.pool_kernel != d.pool_kernel {
            parts.push(format!("pool_kernel={}", self.pool_kernel));
        }
        if self.lag_partition != d.lag_partition {
            parts.push(format!("lag_partition={}", self.lag_partition));
        }
        if self.seed != d.seed {
            parts.push(format!("seed={}", self.seed));
        }
        if parts.is_empty() {
            write!(f, "{}", self.kind.name())
        } else {
            write!(f, "{}:{}", self.kind.name(), parts.join(","))
        }
    }
}

/// A strategy as named on the command line: `kind[:key=val,...]`,
/// `oracle`, or `kvp` for the learned agents.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StrategySpec {
    Oracle,
    Learned,
    Heuristic(HeuristicSpec),
}

impl StrategySpec {
    pub fn name(&self) -> String {
        match self {
            StrategySpec::Oracle => "oracle".into(),
            StrategySpec::Learned => "kvp".into(),
            StrategySpec::Heuristic(h) => h.to_string(),
        }
    }

    /// Parses a comma-separated list. A `key=val` item without a `:` belongs
    /// to the preceding strategy, so `snapkv:pool_kernel=5,observation_window=8,random`
    /// names two strategies.
    pub fn parse_list(s: &str) -> Result<Vec<StrategySpec>> {
        let mut groups: Vec<String> = Vec::new();
        for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            match groups.last_mut() {
                Some(last) if item.contains('=') && !item.contains(':') => {
                    last.push(',');
                    last.push_str(item);
                }
                _ => groups.push(item.to_string()),
            }
        }
        groups.iter().map(|g| g.parse()).collect()
    }
}

impl FromStr for StrategySpec {
    type Err = KvpError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, params) = match s.split_once(':') {
            Some((k, p)) => (k.trim(), Some(p)),
            None => (s.trim(), None),
        };
        let spec = match kind {
            "oracle" => StrategySpec::Oracle,
            "kvp" | "learned" => StrategySpec::Learned,
            other => {
                let mut h = HeuristicSpec::new(other.parse()?);
                for kv in params.into_iter().flat_map(|p| p.split(',')).filter(|x| !x.is_empty()) {
                    let (k, v) =
                        kv.split_once('=').ok_or_else(|| KvpError::Usage(format!("expected key=val, got {kv:?}")))?;
                    h.set(k.trim(), v.trim())?;
                }
                h.validate()?;
                return Ok(StrategySpec::Heuristic(h));
            }
        };
        if params.is_some_and(|p| !p.is_empty()) {
            return Err(KvpError::Usage(format!("{kind} takes no parameters")));
        }
        Ok(spec)
    }
}

/// Scores for the first `n` tokens of `view` under a heuristic.
pub fn heuristic_scores(spec: &HeuristicSpec, view: &HeadTraceView<'_>, n: usize) -> Result<Vec<f64>> {
    if n == 0 || n > view.seq_len {
        return Err(KvpError::Bounds { what: "cache size", index: n, limit: view.seq_len });
    }
    spec.validate()?;
    Ok(match spec.kind {
        HeuristicKind::Random => {
            let mut r = rng::stream(spec.seed, &[view.layer as u64, view.kv_head as u64, n as u64]);
            (0..n).map(|_| r.random::<f64>()).collect()
        }
        HeuristicKind::StreamingLlm => {
            let sinks = spec.sink_count.min(n);
            (0..n).map(|i| if i < sinks { (n + sinks - i) as f64 } else { i as f64 }).collect()
        }
        HeuristicKind::KNorm => (0..n).map(|i| -norm(view.key(i))).collect(),
        HeuristicKind::KeyDiff => keydiff(view, n),
        HeuristicKind::LagKv => lagkv(view, n, spec.lag_partition),
        HeuristicKind::Tova => gqa_row(view, n - 1)?,
        HeuristicKind::SnapKv => snapkv(view, n, spec.observation_window, spec.pool_kernel)?,
    })
}

fn norm(x: &[f32]) -> f64 {
    x.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt()
}

/// Negative cosine similarity to the mean key: keys most similar to the
/// mean are evicted first.
fn keydiff(view: &HeadTraceView<'_>, n: usize) -> Vec<f64> {
    let d = view.head_dim;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(view.key(i)) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mean_norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    (0..n)
        .map(|i| {
            let k = view.key(i);
            let kn = norm(k);
            if kn == 0.0 || mean_norm == 0.0 {
                return 0.0;
            }
            let dot: f64 = k.iter().zip(&mean).map(|(&a, b)| a as f64 * b).sum();
            -dot / (kn * mean_norm)
        })
        .collect()
}

/// Per-block min-max normalization against the following block's range;
/// the score is the spread of a token's normalized `[k, v]`.
fn lagkv(view: &HeadTraceView<'_>, n: usize, lag: usize) -> Vec<f64> {
    let d = view.head_dim;
    let range = |start: usize, end: usize| {
        let mut lo = vec![f64::INFINITY; 2 * d];
        let mut hi = vec![f64::NEG_INFINITY; 2 * d];
        for i in start..end {
            for (c, &x) in view.key(i).iter().chain(view.value(i)).enumerate() {
                lo[c] = lo[c].min(x as f64);
                hi[c] = hi[c].max(x as f64);
            }
        }
        (lo, hi)
    };
    let mut scores = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + lag).min(n);
        let (lo, hi) = if end < n { range(end, (end + lag).min(n)) } else { range(start, end) };
        for i in start..end {
            let normed: Vec<f64> = view
                .key(i)
                .iter()
                .chain(view.value(i))
                .enumerate()
                .map(|(c, &x)| {
                    let span = hi[c] - lo[c];
                    (x as f64 - lo[c]) / if span > 1e-12 { span } else { 1.0 }
                })
                .collect();
            let m = normed.iter().sum::<f64>() / normed.len() as f64;
            let var = normed.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / normed.len() as f64;
            scores.push(var.sqrt());
        }
        start = end;
    }
    scores
}

/// Mean group attention from the last `window` prefill queries, max-pooled.
fn snapkv(view: &HeadTraceView<'_>, n: usize, window: usize, kernel: usize) -> Result<Vec<f64>> {
    let w = if window > n {
        log::debug!("snapkv observation window {window} shrunk to cache size {n}");
        n
    } else {
        window
    };
    let mut votes = vec![0.0; n];
    for j in n - w..n {
        for (v, a) in votes.iter_mut().zip(gqa_row(view, j)?) {
            *v += a;
        }
    }
    votes.iter_mut().for_each(|v| *v /= w as f64);
    let k = kernel.min(n);
    let left = k / 2;
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + k - left).min(n);
            votes[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Anything that can rank a cache.
#[derive(Debug, Clone, Copy)]
pub enum Ranker<'a> {
    /// Sorts by true future importance over the rest of the trace.
    Oracle,
    Learned(&'a AgentCheckpoint),
    Heuristic(&'a HeuristicSpec),
}

/// Scores → deterministic ranking → optional protection.
pub fn rank_with(
    ranker: Ranker<'_>,
    view: &HeadTraceView<'_>,
    n: usize,
    protection: Option<Protection>,
) -> Result<Ranking> {
    let ranking = match ranker {
        Ranker::Oracle => {
            if n >= view.seq_len {
                return Err(KvpError::Horizon { n, f: 1, seq_len: view.seq_len });
            }
            oracle_ranking(&future_importance(view, n, view.seq_len - n)?)
        }
        Ranker::Learned(ck) => deterministic_ranking(&ck.scores(view, n)?),
        Ranker::Heuristic(spec) => deterministic_ranking(&heuristic_scores(spec, view, n)?),
    };
    Ok(match protection {
        Some(p) => apply_protection(&ranking, p),
        None => ranking,
    })
}
