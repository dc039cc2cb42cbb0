//! The ranking agent: cache-entry featurization, Gumbel-sort sampling of
//! Plackett-Luce permutations, their exact log-probability and gradient,
//! and deterministic ranking with prefix/suffix protection.

use std::cmp::Ordering;

use rand::distr::Open01;
use rand::Rng;

use crate::error::{KvpError, Result};
use crate::trace::HeadTraceView;

/// Denominator of the absolute position feature.
pub const POS_SCALE: f64 = 4096.0;
pub const N_POS_FEATURES: usize = 2;

pub fn input_dim(head_dim: usize) -> usize {
    2 * head_dim + N_POS_FEATURES
}

/// Per-dimension z-score statistics for `concat(k, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(head_dim: usize) -> Self {
        FeatureStats { mean: vec![0.0; 2 * head_dim], std: vec![1.0; 2 * head_dim] }
    }

    /// Replaces zero (or non-finite) standard deviations with 1.
    pub fn new(mean: Vec<f64>, mut std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || !mean.len().is_multiple_of(2) {
            return Err(KvpError::Shape(format!(
                "stats lengths mean={} std={} must be equal and even",
                mean.len(),
                std.len()
            )));
        }
        for (d, s) in std.iter_mut().enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                log::warn!("feature dimension {d} has std {s}; using 1");
                *s = 1.0;
            }
        }
        Ok(FeatureStats { mean, std })
    }

    /// Estimates statistics over the first `n` tokens of every view.
    pub fn estimate<'a, I>(views: I, head_dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (HeadTraceView<'a>, usize)>,
    {
        let dim = 2 * head_dim;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut count = 0usize;
        for (view, n) in views {
            for i in 0..n.min(view.seq_len) {
                for (d, &x) in view.key(i).iter().chain(view.value(i)).enumerate() {
                    sum[d] += x as f64;
                    sq[d] += x as f64 * x as f64;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Ok(Self::identity(head_dim));
        }
        let c = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / c - m * m).max(0.0).sqrt()).collect();
        Self::new(mean, std)
    }

    pub fn head_dim(&self) -> usize {
        self.mean.len() / 2
    }
}

/// Row-major `[n, in_dim]` policy inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringFeatures {
    pub x: Vec<f64>,
    pub n: usize,
    pub in_dim: usize,
}

/// Builds `concat(norm(k_i), norm(v_i), i/n, i/POS_SCALE)` for `i < n`.
/// Reads only keys, values and positions.
pub fn featurize(view: &HeadTraceView<'_>, n: usize, stats: &FeatureStats) -> Result<ScoringFeatures> {
    if n > view.seq_len {
        return Err(KvpError::Bounds { what: "cache size", index: n, limit: view.seq_len });
    }
    if stats.head_dim() != view.head_dim {
        return Err(KvpError::Shape(format!("stats cover head_dim {}, view has {}", stats.head_dim(), view.head_dim)));
    }
    let in_dim = input_dim(view.head_dim);
    let mut x = Vec::with_capacity(n * in_dim);
    for i in 0..n {
        let kv = view.key(i).iter().chain(view.value(i));
        for ((&raw, m), s) in kv.zip(&stats.mean).zip(&stats.std) {
            x.push((raw as f64 - m) / s);
        }
        x.push(i as f64 / n as f64);
        x.push(i as f64 / POS_SCALE);
    }
    Ok(ScoringFeatures { x, n, in_dim })
}

/// A permutation of cache indices, most valuable first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ranking {
    order: Vec<usize>,
}

impl Ranking {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(KvpError::Validation(format!("{order:?} is not a permutation")));
            }
        }
        Ok(Ranking { order })
    }

    pub fn identity(n: usize) -> Self {
        Ranking { order: (0..n).collect() }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `rank_of()[token]` is the rank held by `token`.
    pub fn rank_of(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (r, &i) in self.order.iter().enumerate() {
            inv[i] = r;
        }
        inv
    }

    /// The tokens kept under budget `b`: the first `b` ranks.
    pub fn keep_set(&self, b: usize) -> &[usize] {
        &self.order[..b.min(self.order.len())]
    }

    pub fn into_order(self) -> Vec<usize> {
        self.order
    }
}

fn descending(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Sorts by descending score; ties go to the earlier position.
pub fn deterministic_ranking(scores: &[f64]) -> Ranking {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(descending(scores));
    Ranking { order }
}

/// Gumbel-sort draw from the Plackett-Luce distribution over `scores`.
pub fn sample_permutation<R: Rng + ?Sized>(scores: &[f64], rng: &mut R) -> Ranking {
    sample_permutation_scaled(scores, rng, 1.0)
}

/// As [`sample_permutation`] with the Gumbel noise multiplied by
/// `noise_scale`; a scale of 0 reduces to [`deterministic_ranking`].
pub fn sample_permutation_scaled<R: Rng + ?Sized>(scores: &[f64], rng: &mut R, noise_scale: f64) -> Ranking {
    let perturbed: Vec<f64> = scores
        .iter()
        .map(|&s| {
            let u: f64 = rng.sample(Open01);
            s + noise_scale * -(-u.ln()).ln()
        })
        .collect();
    deterministic_ranking(&perturbed)
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Plackett-Luce log-probability of `ranking` and its gradient with respect
/// to `scores`, in O(n).
pub fn log_prob(scores: &[f64], ranking: &Ranking) -> Result<(f64, Vec<f64>)> {
    let n = scores.len();
    if ranking.len() != n {
        return Err(KvpError::Shape(format!("ranking over {} items, {n} scores", ranking.len())));
    }
    let s: Vec<f64> = ranking.order.iter().map(|&i| scores[i]).collect();
    // suffix log-sum-exp
    let mut lse = vec![0.0; n];
    let mut acc = f64::NEG_INFINITY;
    for r in (0..n).rev() {
        acc = log_add_exp(acc, s[r]);
        lse[r] = acc;
    }
    let logp = s.iter().zip(&lse).map(|(a, l)| a - l).sum();
    // d/ds_{order[t]} = 1 - sum_{r <= t} exp(s_t - lse_r)
    let mut grad = vec![0.0; n];
    let mut prefix = f64::NEG_INFINITY;
    for t in 0..n {
        prefix = log_add_exp(prefix, -lse[t]);
        grad[ranking.order[t]] = 1.0 - (s[t] + prefix).exp();
    }
    Ok((logp, grad))
}

/// Always-kept prefix/suffix sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Protection {
    pub prefix: usize,
    pub suffix: usize,
}

impl Default for Protection {
    fn default() -> Self {
        Protection { prefix: 4, suffix: 16 }
    }
}

/// Moves the protected prefix and suffix tokens to the top ranks (in
/// position order), keeping the input order of everything else.
pub fn apply_protection(ranking: &Ranking, protection: Protection) -> Ranking {
    let n = ranking.len();
    if n <= protection.prefix + protection.suffix {
        return Ranking::identity(n);
    }
    let tail_start = n - protection.suffix;
    let protected = |i: usize| i < protection.prefix || i >= tail_start;
    let mut order: Vec<usize> = (0..protection.prefix).chain(tail_start..n).collect();
    order.extend(ranking.order.iter().copied().filter(|&i| !protected(i)));
    Ranking { order }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_features_have_zero_position_at_origin() {
        let k = vec![0.0f32; 6];
        let v = vec![0.0f32; 6];
        let q = vec![1.0f32; 6];
        let view = HeadTraceView::from_slices(0, 0, 3, 2, 1, &k, &v, &q).unwrap();
        let f = featurize(&view, 3, &FeatureStats::identity(2)).unwrap();
        assert_eq!(f.in_dim, 6);
        assert_eq!(&f.x[..6], &[0.0; 6]);
        // last row: first position feature (n-1)/n
        assert_eq!(f.x[2 * 6 + 4], 2.0 / 3.0);
        assert_eq!(f.x[2 * 6 + 5], 2.0 / POS_SCALE);
    }

    #[test]
    fn zero_std_is_guarded() {
        let s = FeatureStats::new(vec![0.0; 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(s.std, vec![1.0, 2.0]);
    }

    #[test]
    fn deterministic_examples() {
        assert_eq!(deterministic_ranking(&[0.1, 0.9, 0.5]).order(), &[1, 2, 0]);
        assert_eq!(deterministic_ranking(&[0.0; 4]).order(), &[0, 1, 2, 3]);
        let scores = [0.3, -1.0, 2.0, 0.3];
        let mut r = rng::stream(1, &[]);
        assert_eq!(sample_permutation_scaled(&scores, &mut r, 0.0), deterministic_ranking(&scores));
    }

    #[test]
    fn single_item_sample() {
        let mut r = rng::stream(5, &[]);
        for _ in 0..10 {
            assert_eq!(sample_permutation(&[3.0], &mut r).order(), &[0]);
        }
    }

    #[test]
    fn log_prob_examples() {
        let r = Ranking::new(vec![2, 0, 1]).unwrap();
        let (lp, _) = log_prob(&[0.7; 3], &r).unwrap();
        assert!((lp - (1.0f64 / 6.0).ln()).abs() < 1e-12);

        let s = [2f64.ln(), 0.0];
        let (a, _) = log_prob(&s, &Ranking::new(vec![0, 1]).unwrap()).unwrap();
        let (b, _) = log_prob(&s, &Ranking::new(vec![1, 0]).unwrap()).unwrap();
        assert!((a - (2.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((b - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn ranking_validation() {
        assert!(Ranking::new(vec![0, 0]).is_err());
        assert!(Ranking::new(vec![0, 2]).is_err());
        let r = Ranking::new(vec![2, 0, 1]).unwrap();
        assert_eq!(r.rank_of(), vec![1, 2, 0]);
        assert_eq!(r.keep_set(2), &[2, 0]);
    }

    #[test]
    fn protection_examples() {
        let p = apply_protection(&Ranking::identity(25), Protection::default());
        let expect: Vec<usize> = (0..4).chain(9..25).chain(4..9).collect();
        assert_eq!(p.order(), &expect[..]);

        let reversed = Ranking::new((0..10).rev().collect()).unwrap();
        assert_eq!(apply_protection(&reversed, Protection::default()), Ranking::identity(10));

        let shuffled = Ranking::new(vec![
            7, 24, 5, 0, 12, 6, 3, 4, 8, 1, 2, 9, 10, 11, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23,
        ])
        .unwrap();
        let p = apply_protection(&shuffled, Protection::default());
        assert_eq!(&p.order()[20..], &[7, 5, 6, 4, 8]);
    }
}
