//! Shared oracles for the integration suites. Everything here is written
//! independently of the library code it checks.
#![allow(dead_code)]

use kvp_core::trace::{Trace, TraceHeader};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Plackett-Luce probability of `order` as a product of sequential softmaxes.
pub fn pl_probability(scores: &[f64], order: &[usize]) -> f64 {
    let mut p = 1.0;
    for r in 0..order.len() {
        let z: f64 = order[r..].iter().map(|&i| scores[i].exp()).sum();
        p *= scores[order[r]].exp() / z;
    }
    p
}

/// Evicted mass summed directly over every budget `1..n-1`.
pub fn brute_total_cost(imp: &[f64], order: &[usize]) -> f64 {
    (1..imp.len()).map(|b| order[b..].iter().map(|&i| imp[i]).sum::<f64>()).sum()
}

pub fn random_scores(r: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

/// A random permutation by Fisher-Yates.
pub fn random_perm(r: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// A valid trace with random geometry and contents.
pub fn random_trace(r: &mut impl Rng) -> Trace {
    let n_layers = r.random_range(1..=3);
    let n_kv = r.random_range(1..=3);
    let group = r.random_range(1..=3);
    let head_dim = r.random_range(1..=16);
    let seq_len = r.random_range(2..=40);
    let header = TraceHeader::new(n_layers, n_kv * group, n_kv, head_dim, seq_len).unwrap();
    let mut fill = |len: usize| -> Vec<f32> { (0..len).map(|_| r.random_range(-8.0f32..8.0)).collect() };
    let q = fill(header.q_len());
    let k = fill(header.kv_len());
    let v = fill(header.kv_len());
    let ids = r.random_bool(0.5).then(|| (0..seq_len).map(|_| r.random()).collect());
    Trace::new(header, q, k, v, ids).unwrap()
}

/// Bitwise equality of two traces, including signed zeros.
pub fn traces_bit_equal(a: &Trace, b: &Trace) -> bool {
    let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    a.header() == b.header()
        && bits(a.q()) == bits(b.q())
        && bits(a.k()) == bits(b.k())
        && bits(a.v()) == bits(b.v())
        && a.token_ids() == b.token_ids()
}

/// Relative error with a scale floor for near-zero derivatives.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
