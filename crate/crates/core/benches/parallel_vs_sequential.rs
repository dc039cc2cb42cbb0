use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kvp_core::attention::future_importance;
use kvp_core::eval::{cost_curve, BudgetGrid, EvalSplit};
use kvp_core::heuristics::{HeuristicKind, HeuristicSpec, Ranker};
use kvp_core::par::Exec;
use kvp_core::policy::sample_permutation;
use kvp_core::rng;
use kvp_core::synth::{gen_trace, SynthSpec};
use kvp_core::trace::TraceSet;
use kvp_core::trainer::{train_all, TrainerConfig};

fn traceset(count: usize, n_layers: usize, n_kv_heads: usize) -> TraceSet {
    let base = SynthSpec { n_layers, n_kv_heads, n_q_heads: 2 * n_kv_heads, ..Default::default() };
    let traces = (0..count).map(|i| gen_trace(&base, i as u64).unwrap().trace).collect();
    TraceSet::new(traces).unwrap()
}

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel(0))];

fn bench_cost_curve(c: &mut Criterion) {
    let set = traceset(32, 1, 1);
    let spec = HeuristicSpec::new(HeuristicKind::SnapKv);
    let grid = BudgetGrid::default();
    let mut group = c.benchmark_group("cost_curve_32_traces");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                cost_curve("snapkv", Ranker::Heuristic(&spec), &set, 0, 0, &grid, EvalSplit::default(), None, exec)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_importance(c: &mut Criterion) {
    let set = traceset(32, 1, 1);
    let mut group = c.benchmark_group("future_importance_32_traces");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                exec.map(&set.traces, |t| {
                    let view = t.head_view(0, 0).unwrap();
                    future_importance(&view, 128, 128).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_gumbel_sampling(c: &mut Criterion) {
    let scores: Vec<f64> = (0..4096).map(|i| (i as f64 * 0.37).sin()).collect();
    let episodes: Vec<u64> = (0..64).collect();
    let mut group = c.benchmark_group("gumbel_sort_64x4096");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(&episodes, |&e| sample_permutation(&scores, &mut rng::stream(1, &[e]))))
        });
    }
    group.finish();
}

fn bench_train_all(c: &mut Criterion) {
    let set = traceset(8, 2, 2);
    let config = TrainerConfig { hidden: 64, ..TrainerConfig::default().with_steps(20) };
    let dir = tempfile::tempdir().unwrap();
    let mut group = c.benchmark_group("train_all_4_heads_20_steps");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train_all(&set, &config, None, exec, dir.path()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_cost_curve, bench_importance, bench_gumbel_sampling, bench_train_all);
criterion_main!(benches);
