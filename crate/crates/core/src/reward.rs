//! Eviction cost of a ranking over every budget, its oracle normalization,
//! and recovery of a ranking from nested optimal keep-sets.
//!
//! Costs are positive: the cost at budget `b` is the future attention mass
//! of everything ranked at `b` or later, and the total cost sums that over
//! `b = 1..n-1`.

use crate::attention::ImportanceVector;
use crate::error::{KvpError, Result};
use crate::policy::{deterministic_ranking, Ranking};

pub const DEFAULT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RewardBreakdown {
    pub total_cost: f64,
    pub oracle_cost: f64,
    /// `-total_cost / oracle_cost`; `-1` is optimal, `0` when degenerate.
    pub normalized_reward: f64,
    /// Set when the oracle cost is within `eps` of zero.
    pub degenerate: bool,
    pub per_budget_cost: Option<Vec<f64>>,
}

impl RewardBreakdown {
    /// `C / C*`, 1 at the optimum.
    pub fn cost_ratio(&self) -> f64 {
        -self.normalized_reward
    }
}

fn check_len(imp: &ImportanceVector, ranking: &Ranking) -> Result<()> {
    if imp.len() != ranking.len() {
        return Err(KvpError::Shape(format!("ranking over {} tokens, importance over {}", ranking.len(), imp.len())));
    }
    Ok(())
}

/// Mass evicted when only the top `b` ranks are kept.
pub fn per_budget_cost(imp: &ImportanceVector, ranking: &Ranking, b: usize) -> Result<f64> {
    check_len(imp, ranking)?;
    let n = imp.len();
    if b == 0 || b >= n {
        return Err(KvpError::Budget { budget: b, max: n.saturating_sub(1) });
    }
    Ok(ranking.order()[b..].iter().map(|&i| imp.imp[i]).sum())
}

/// Costs at every budget `1..n-1` via one suffix pass.
pub fn per_budget_costs(imp: &ImportanceVector, ranking: &Ranking) -> Result<Vec<f64>> {
    check_len(imp, ranking)?;
    let n = imp.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    let mut out = vec![0.0; n - 1];
    let mut acc = 0.0;
    for r in (1..n).rev() {
        acc += imp.imp[ranking.order()[r]];
        out[r - 1] = acc;
    }
    Ok(out)
}

/// Budget-summed cost in closed form: each token costs its importance once
/// per budget that evicts it, i.e. `rank` times.
pub fn total_cost(imp: &ImportanceVector, ranking: &Ranking) -> Result<f64> {
    check_len(imp, ranking)?;
    Ok(ranking.order().iter().enumerate().map(|(r, &i)| r as f64 * imp.imp[i]).sum())
}

/// Descending importance, earlier position first on ties.
pub fn oracle_ranking(imp: &ImportanceVector) -> Ranking {
    deterministic_ranking(&imp.imp)
}

pub fn normalized_reward(imp: &ImportanceVector, ranking: &Ranking, eps: f64) -> Result<RewardBreakdown> {
    let total = total_cost(imp, ranking)?;
    let oracle = total_cost(imp, &oracle_ranking(imp))?;
    Ok(breakdown(total, oracle, eps))
}

/// As [`normalized_reward`] with a precomputed oracle cost.
pub fn normalized_reward_with_oracle(
    imp: &ImportanceVector,
    ranking: &Ranking,
    oracle_cost: f64,
    eps: f64,
) -> Result<RewardBreakdown> {
    Ok(breakdown(total_cost(imp, ranking)?, oracle_cost, eps))
}

fn breakdown(total: f64, oracle: f64, eps: f64) -> RewardBreakdown {
    let degenerate = oracle <= eps;
    RewardBreakdown {
        total_cost: total,
        oracle_cost: oracle,
        normalized_reward: if degenerate { 0.0 } else { -total / oracle.max(eps) },
        degenerate,
        per_budget_cost: None,
    }
}

/// Rebuilds the ranking whose top-`b` prefix is `sets[b-1]` for every `b`.
pub fn ranking_from_nested_sets(sets: &[Vec<usize>]) -> Result<Ranking> {
    let n = sets.len();
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for (idx, set) in sets.iter().enumerate() {
        let b = idx + 1;
        if set.len() != b {
            return Err(KvpError::Structure { b, reason: format!("|S_b| = {}, expected {b}", set.len()) });
        }
        let mut fresh = None;
        let mut members = 0;
        for &i in set {
            if i >= n {
                return Err(KvpError::Structure { b, reason: format!("token {i} outside [0, {n})") });
            }
            if taken[i] {
                members += 1;
            } else if fresh.replace(i).is_some() {
                return Err(KvpError::Structure { b, reason: "more than one new element".into() });
            }
        }
        if members != b - 1 {
            return Err(KvpError::Structure { b, reason: "S_{b-1} is not contained in S_b".into() });
        }
        let i = fresh.ok_or_else(|| KvpError::Structure { b, reason: "no new element".into() })?;
        taken[i] = true;
        order.push(i);
    }
    Ranking::new(order)
}

/// Prefix keep-sets `S_1 .. S_n` of a ranking.
pub fn nested_sets(ranking: &Ranking) -> Vec<Vec<usize>> {
    (1..=ranking.len()).map(|b| ranking.keep_set(b).to_vec()).collect()
}
