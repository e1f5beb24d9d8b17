use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use hydra_core::harness::synth::walkthrough_trace;
use hydra_core::harness::{run_task, TaskSpec};
use hydra_core::models::{cond_fail, Belief, CostModelParams};
use hydra_core::policies::{group_score, tokpol_select, tokpolk_select, GroupMember};

const E: u64 = 4000;

fn candidates(n: usize) -> (Vec<u64>, Vec<f64>) {
    let offs: Vec<u64> = (0..n as u64).map(|i| i * (E - 1) / n as u64).collect();
    let p = CostModelParams::default();
    let costs = offs.iter().map(|&c| p.token_cost(c, E, c).unwrap()).collect();
    (offs, costs)
}

fn tokpol(c: &mut Criterion) {
    let prior = Belief::default_prior();
    let mut g = c.benchmark_group("tokpol_select");
    for n in [6, 32, 128] {
        let (offs, costs) = candidates(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| tokpol_select(black_box(&offs), &costs, E, &prior, 0.5).unwrap())
        });
    }
    g.finish();
}

fn tokpolk(c: &mut Criterion) {
    let prior = Belief::default_prior();
    let p = CostModelParams::default();
    let mut g = c.benchmark_group("tokpolk_select");
    for n in [6, 32] {
        let (offs, _) = candidates(n);
        let pool: Vec<(u64, GroupMember)> =
            offs.iter().map(|&o| (o, GroupMember::of(o, o, E, &p).unwrap())).collect();
        g.bench_with_input(BenchmarkId::new("add3", n), &n, |b, _| {
            b.iter(|| tokpolk_select(black_box(&pool), &[], 3, &prior, 0.5).unwrap())
        });
    }
    g.finish();
    let group: Vec<GroupMember> = (1..=4).map(|i| GroupMember::of(i * 700, i * 700, E, &p).unwrap()).collect();
    c.bench_function("group_score_4", |b| b.iter(|| group_score(black_box(&group), &prior, 0.5)));
}

fn belief(c: &mut Criterion) {
    let prior = Belief::default_prior();
    c.bench_function("cond_fail", |b| b.iter(|| cond_fail(black_box(&prior), 1200, E, 0.5).unwrap()));
}

fn walkthrough(c: &mut Criterion) {
    let spec = TaskSpec::from_trace("walkthrough", walkthrough_trace(), "tokpol");
    c.bench_function("walkthrough_virtual", |b| b.iter(|| run_task(black_box(&spec)).unwrap()));
}

criterion_group!(benches, tokpol, tokpolk, belief, walkthrough);
criterion_main!(benches);
