mod common;

use std::fs;

use kvp_core::attention::{future_importance, ImportanceVector};
use kvp_core::par::Exec;
use kvp_core::reward::oracle_ranking;
use kvp_core::synth::{gen_trace, gen_traceset, planted_of, trace_seed, Archetype, SynthSpec};
use kvp_core::trace::{Manifest, Split, SplitFilter, TraceSet};
use tempfile::tempdir;

const N: usize = 204;
const F: usize = 52;

fn content(signal: f64, seed: u64) -> SynthSpec {
    SynthSpec { archetype: Archetype::Content, signal_strength: signal, seed, ..SynthSpec::default() }
}

/// Importance of the first `N` tokens plus the planted ones among them.
fn head_importance(spec: &SynthSpec, index: usize) -> (Vec<f64>, Vec<usize>) {
    let st = gen_trace(spec, trace_seed(spec, index)).unwrap();
    let view = st.trace.head_view(0, 0).unwrap();
    let imp = future_importance(&view, N, F).unwrap().imp;
    let planted = planted_of(&st, 0, 0).iter().copied().filter(|&i| i < N).collect();
    (imp, planted)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len().is_multiple_of(2) {
        (xs[m - 1] + xs[m]) / 2.0
    } else {
        xs[m]
    }
}

/// Two-sided Mann-Whitney U test, normal approximation with average ranks.
fn mann_whitney_p(a: &[f64], b: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = a.iter().map(|&x| (x, true)).chain(b.iter().map(|&x| (x, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_sum_a = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_a += all[i..=j].iter().filter(|x| x.1).count() as f64 * avg;
        i = j + 1;
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let z = (u - n1 * n2 / 2.0) / (n1 * n2 * (n1 + n2 + 1.0) / 12.0).sqrt();
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

#[test]
fn planted_tokens_are_at_least_five_times_the_median() {
    let spec = content(4.0, 11);
    let ratios: Vec<f64> = (0..10)
        .map(|i| {
            let (imp, planted) = head_importance(&spec, i);
            let rest: Vec<f64> = (0..N).filter(|i| !planted.contains(i)).map(|i| imp[i]).collect();
            let mean_planted = planted.iter().map(|&i| imp[i]).sum::<f64>() / planted.len() as f64;
            mean_planted / median(rest)
        })
        .collect();
    let avg = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(avg >= 5.0, "planted/median ratios {ratios:?}");
}

#[test]
fn oracle_top_set_recovers_planted_tokens() {
    // the number of planted tokens that land inside the cache varies per
    // trace, so a single trace can hold more of them than the top set does
    let spec = content(4.0, 12);
    let top = (spec.important_fraction * N as f64).ceil() as usize;
    let (mut hits, mut total) = (0, 0);
    for i in 0..10 {
        let (imp, planted) = head_importance(&spec, i);
        let ranking = oracle_ranking(&ImportanceVector::new(imp));
        let kept = ranking.keep_set(top);
        let hit = planted.iter().filter(|p| kept.contains(p)).count();
        assert!(hit as f64 >= 0.9 * planted.len().min(top) as f64, "trace {i}: {hit}/{}", planted.len());
        hits += hit;
        total += planted.len();
    }
    assert!(hits as f64 >= 0.9 * total as f64, "{hits}/{total}");
}

#[test]
fn zero_signal_leaves_planted_tokens_indistinguishable() {
    let spec = content(0.0, 13);
    let (imp, planted) = head_importance(&spec, 0);
    let a: Vec<f64> = planted.iter().map(|&i| imp[i]).collect();
    let b: Vec<f64> = (0..N).filter(|i| !planted.contains(i)).map(|i| imp[i]).collect();
    let p = mann_whitney_p(&a, &b);
    assert!(p > 0.01, "p = {p}");
    // the same test detects a real signal
    let (imp, planted) = head_importance(&content(4.0, 13), 0);
    let a: Vec<f64> = planted.iter().map(|&i| imp[i]).collect();
    let b: Vec<f64> = (0..N).filter(|i| !planted.contains(i)).map(|i| imp[i]).collect();
    assert!(mann_whitney_p(&a, &b) < 1e-6);
}

#[test]
fn sink_archetype_concentrates_on_the_first_keys() {
    let spec = SynthSpec { archetype: Archetype::Sink, ..SynthSpec::default() };
    let st = gen_trace(&spec, 1).unwrap();
    let imp = future_importance(&st.trace.head_view(0, 0).unwrap(), N, F).unwrap().imp;
    let sink_min = imp[..4].iter().copied().fold(f64::INFINITY, f64::min);
    let rest_max = imp[4..].iter().copied().fold(0.0, f64::max);
    assert!(sink_min > rest_max, "{sink_min} vs {rest_max}");
    assert!(st.planted.iter().all(Vec::is_empty));
}

#[test]
fn recency_archetype_favours_recent_tokens() {
    // the decay holds in expectation over the rotary frequencies, so average
    // the profile over several heads
    let mut imp = vec![0.0; N];
    for seed in 0..20 {
        let spec = SynthSpec { archetype: Archetype::Recency, seed, ..SynthSpec::default() };
        let st = gen_trace(&spec, seed).unwrap();
        let one = future_importance(&st.trace.head_view(0, 0).unwrap(), N, F).unwrap().imp;
        imp.iter_mut().zip(one).for_each(|(a, b)| *a += b);
    }
    let mean = |r: std::ops::Range<usize>| imp[r.clone()].iter().sum::<f64>() / r.len() as f64;
    assert!(mean(N - 20..N) > 2.0 * mean(0..N - 20), "{} vs {}", mean(N - 20..N), mean(0..N - 20));
}

#[test]
fn generated_traces_are_valid_and_deterministic() {
    for archetype in [Archetype::Sink, Archetype::Recency, Archetype::Content, Archetype::Mixed] {
        let spec =
            SynthSpec { archetype, n_layers: 2, n_q_heads: 4, n_kv_heads: 2, seq_len: 64, ..SynthSpec::default() };
        let a = gen_trace(&spec, 5).unwrap();
        let b = gen_trace(&spec, 5).unwrap();
        a.trace.validate().unwrap();
        assert!(common::traces_bit_equal(&a.trace, &b.trace));
        assert_eq!(a.planted, b.planted);
        assert!(!common::traces_bit_equal(&a.trace, &gen_trace(&spec, 6).unwrap().trace));
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let base = SynthSpec::default();
    for bad in [
        SynthSpec { important_fraction: 0.0, ..base.clone() },
        SynthSpec { important_fraction: 1.0, ..base.clone() },
        SynthSpec { signal_strength: -1.0, ..base.clone() },
        SynthSpec { n_q_heads: 3, n_kv_heads: 2, ..base.clone() },
        SynthSpec { seq_len: 1, ..base.clone() },
    ] {
        assert!(gen_trace(&bad, 0).is_err(), "{bad:?}");
    }
}

#[test]
fn config_text_round_trips() {
    let spec = SynthSpec { archetype: Archetype::Mixed, signal_strength: 2.5, seed: 99, ..SynthSpec::default() };
    assert_eq!(SynthSpec::from_config(&spec.to_config()).unwrap(), spec);
    assert!(SynthSpec::from_config("colour=blue").is_err());
}

#[test]
fn traceset_of_ten_splits_eight_two() {
    let dir = tempdir().unwrap();
    let spec = SynthSpec { seq_len: 32, head_dim: 8, seed: 7, ..SynthSpec::default() };
    let manifest = gen_traceset(&spec, 10, dir.path(), Exec::default()).unwrap();
    let m = Manifest::load(&manifest).unwrap();
    assert_eq!(m.entries.iter().filter(|e| e.1 == Split::Train).count(), 8);
    assert_eq!(m.entries.iter().filter(|e| e.1 == Split::Test).count(), 2);
    assert!(m.entries[8..].iter().all(|e| e.1 == Split::Test));
    let kvtr = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "kvtr"))
        .count();
    assert_eq!(kvtr, 10);
    assert_eq!(TraceSet::load(&manifest, SplitFilter::Test).unwrap().len(), 2);
    assert_eq!(TraceSet::load(&manifest, SplitFilter::All).unwrap().len(), 10);
}

#[test]
fn rerunning_a_traceset_reproduces_every_byte() {
    let spec = SynthSpec { seq_len: 32, head_dim: 8, seed: 8, ..SynthSpec::default() };
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    gen_traceset(&spec, 6, a.path(), Exec::Sequential).unwrap();
    gen_traceset(&spec, 6, b.path(), Exec::Parallel(3)).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for name in names {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn empty_traceset_writes_an_empty_manifest() {
    let dir = tempdir().unwrap();
    let manifest = gen_traceset(&SynthSpec::default(), 0, dir.path(), Exec::default()).unwrap();
    assert!(Manifest::load(&manifest).unwrap().entries.is_empty());
}
