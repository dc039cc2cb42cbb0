//! Causal attention recomputation and future-attention importance.

use crate::error::{KvpError, Result};
use crate::trace::HeadTraceView;

/// How the G query heads of a KV group are folded into one attention row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

/// Cumulative future attention mass on each of the first `n` cached tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub imp: Vec<f64>,
}

impl ImportanceVector {
    pub fn new(imp: Vec<f64>) -> Self {
        ImportanceVector { imp }
    }

    pub fn len(&self) -> usize {
        self.imp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imp.is_empty()
    }
}

fn check_position(view: &HeadTraceView<'_>, j: usize) -> Result<()> {
    if j >= view.seq_len {
        return Err(KvpError::Bounds { what: "position", index: j, limit: view.seq_len });
    }
    Ok(())
}

/// Writes the softmax of scaled logits of query `(g, j)` over keys `0..=j`
/// into `out` (resized to `j + 1`).
fn softmax_row_into(view: &HeadTraceView<'_>, g: usize, j: usize, out: &mut Vec<f64>) {
    let q = view.query(g, j);
    let scale = 1.0 / (view.head_dim as f64).sqrt();
    out.clear();
    out.extend((0..=j).map(|i| {
        let k = view.key(i);
        let dot: f64 = q.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum();
        dot * scale
    }));
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in out.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in out.iter_mut() {
        *x *= inv;
    }
}

/// Softmax attention of query head `q_head` at position `j` over keys `0..=j`.
pub fn attention_row(view: &HeadTraceView<'_>, q_head: usize, j: usize) -> Result<Vec<f64>> {
    check_position(view, j)?;
    if q_head >= view.group {
        return Err(KvpError::Bounds { what: "q_head", index: q_head, limit: view.group });
    }
    let mut row = Vec::with_capacity(j + 1);
    softmax_row_into(view, q_head, j, &mut row);
    Ok(row)
}

/// Group-aggregated attention row at position `j`.
pub fn gqa_row(view: &HeadTraceView<'_>, j: usize) -> Result<Vec<f64>> {
    gqa_row_with(view, j, Aggregation::Max)
}

pub fn gqa_row_with(view: &HeadTraceView<'_>, j: usize, agg: Aggregation) -> Result<Vec<f64>> {
    check_position(view, j)?;
    let mut acc = vec![0.0; j + 1];
    let mut row = Vec::with_capacity(j + 1);
    fold_group(view, j, agg, &mut row, &mut acc);
    Ok(acc)
}

/// Aggregates the G rows at position `j` into `acc[..=j]` (overwriting).
fn fold_group(view: &HeadTraceView<'_>, j: usize, agg: Aggregation, row: &mut Vec<f64>, acc: &mut [f64]) {
    for g in 0..view.group {
        softmax_row_into(view, g, j, row);
        match agg {
            Aggregation::Max if g == 0 => acc[..=j].copy_from_slice(row),
            Aggregation::Max => {
                for (a, &r) in acc.iter_mut().zip(row.iter()) {
                    *a = a.max(r);
                }
            }
            Aggregation::Mean => {
                let w = 1.0 / view.group as f64;
                if g == 0 {
                    acc[..=j].iter_mut().for_each(|a| *a = 0.0);
                }
                for (a, &r) in acc.iter_mut().zip(row.iter()) {
                    *a += w * r;
                }
            }
        }
    }
}

/// Importance of the first `n` tokens as seen by future positions
/// `n..n + f`. Each future query's softmax spans its entire causal prefix;
/// only columns `< n` are accumulated.
pub fn future_importance(view: &HeadTraceView<'_>, n: usize, f: usize) -> Result<ImportanceVector> {
    future_importance_with(view, n, f, Aggregation::Max)
}

pub fn future_importance_with(
    view: &HeadTraceView<'_>,
    n: usize,
    f: usize,
    agg: Aggregation,
) -> Result<ImportanceVector> {
    if n == 0 || f == 0 {
        return Err(KvpError::Config(format!("cache size ({n}) and horizon ({f}) must be >= 1")));
    }
    if n + f > view.seq_len {
        return Err(KvpError::Horizon { n, f, seq_len: view.seq_len });
    }
    let mut imp = vec![0.0; n];
    let mut row = Vec::with_capacity(n + f);
    let mut acc = vec![0.0; n + f];
    for j in n..n + f {
        fold_group(view, j, agg, &mut row, &mut acc);
        for (m, &a) in imp.iter_mut().zip(&acc[..n]) {
            *m += a;
        }
    }
    Ok(ImportanceVector::new(imp))
}
