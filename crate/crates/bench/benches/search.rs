use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mcgs_bench::searched;
use mcgs_core::graph::NodeStats;
use mcgs_core::orchestrator::replay;
use mcgs_core::search::{select, uct_score, SearchPolicyConfig, VirtualVisits};
use mcgs_core::ExecState;
use std::hint::black_box;

fn uct(c: &mut Criterion) {
    let cfg = SearchPolicyConfig::default();
    let stats = NodeStats {
        visits: 37,
        value: 11.5,
    };
    c.bench_function("uct_score", |b| {
        b.iter(|| uct_score(black_box(&stats), black_box(420), &cfg))
    });
}

fn selection(c: &mut Criterion) {
    let cfg = SearchPolicyConfig::default();
    let out = searched(1, 500, 1);
    let g = &out.graph;
    let open = |n: &mcgs_core::SolutionNode| n.state == ExecState::Evaluated && g.children(n.node_id).len() < 3;
    c.bench_function("select_500_node_graph", |b| {
        b.iter(|| select(black_box(g), &cfg, open, &VirtualVisits::default()))
    });
}

fn full_search(c: &mut Criterion) {
    let mut group = c.benchmark_group("search");
    group.sample_size(10);
    for workers in [1usize, 3] {
        group.bench_with_input(BenchmarkId::new("500_steps", workers), &workers, |b, &w| {
            b.iter(|| searched(7, 500, w))
        });
    }
    group.finish();
}

fn replay_log(c: &mut Criterion) {
    let out = searched(2, 500, 1);
    c.bench_function("replay_500_steps", |b| {
        b.iter(|| replay(black_box(&out.events)).unwrap())
    });
}

criterion_group!(benches, uct, selection, full_search, replay_log);
criterion_main!(benches);
