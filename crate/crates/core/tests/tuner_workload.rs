use hydra_core::models::CostModelParams;
use hydra_core::tuner::{select_interval, wilson_lower, RepairSample, TunerConfig};
use proptest::prelude::*;

/// Rollbacks `prologue + d` for every d in 0..=d_max, each `gen` bytes
/// before its error. With a linear, stall-free checker the replay slack is
/// M = S_C·(gen/S_G + D_G) − gen, and replay from a(c) catches up iff
/// `d mod f ≤ M`. Every interval up to M + 1 therefore passes on all
/// samples and M + 2 fails on d = M + 1.
struct Workload {
    samples: Vec<RepairSample>,
    params: CostModelParams,
    threshold: u64,
}

fn workload(s_g: f64, d_g: f64, s_c: f64, gen: u64, prologue: u64) -> Workload {
    let params = CostModelParams { s_g, d_g, s_c, f_c: 1.0, l_s: 0.0, d_c: 0.0, q: 0.5 };
    let slack = (s_c * (gen as f64 / s_g + d_g) - gen as f64).floor() as u64;
    let d_max = 3 * (slack + 1) + 17;
    let samples = (0..=d_max)
        .map(|d| {
            let c = prologue + d;
            RepairSample { c, e: c + gen }
        })
        .collect();
    Workload { samples, params, threshold: slack + 1 }
}

/// Target strictly between the all-success and one-failure bounds.
fn all_or_nothing(n: usize, z: f64) -> f64 {
    (wilson_lower(n, n, z).unwrap() + wilson_lower(n - 1, n, z).unwrap()) / 2.0
}

/// Largest grid interval passing, found by scanning every grid point.
fn brute_force(w: &Workload, cfg: &TunerConfig) -> Option<u64> {
    let mut best = None;
    let mut f = cfg.f_min;
    while f <= cfg.f_max {
        let ok = w
            .samples
            .iter()
            .filter(|s| {
                let a = if s.c < cfg.prologue { 0 } else { cfg.prologue + (s.c - cfg.prologue) / f * f };
                (s.e - a) as f64 / w.params.s_c <= (s.e - s.c) as f64 / w.params.s_g + w.params.d_g
            })
            .count();
        if wilson_lower(ok, w.samples.len(), cfg.z).unwrap() >= cfg.q_target {
            best = Some(f);
        }
        f += cfg.granule;
    }
    best
}

#[test]
fn designed_workload_hits_analytic_threshold() {
    let w = workload(200.0, 0.5, 1000.0, 100, 0);
    assert_eq!(w.threshold, 901);
    let cfg = TunerConfig { q_target: all_or_nothing(w.samples.len(), 1.959964), ..TunerConfig::default() };
    let got = select_interval(&w.samples, &w.params, &cfg).unwrap();
    assert!(!got.infeasible);
    assert!(got.f_c <= w.threshold && w.threshold - got.f_c < cfg.granule, "{got:?}");
    assert_eq!(got.f_c, 896);
    assert_eq!(Some(got.f_c), brute_force(&w, &cfg));
    assert_eq!(got.successes, got.trials);
}

#[test]
fn prologue_shifts_the_grid() {
    let w = workload(150.0, 0.2, 2500.0, 60, 37);
    let cfg = TunerConfig {
        q_target: all_or_nothing(w.samples.len(), 1.959964),
        prologue: 37,
        ..TunerConfig::default()
    };
    let got = select_interval(&w.samples, &w.params, &cfg).unwrap();
    assert!(got.f_c <= w.threshold && w.threshold - got.f_c < cfg.granule, "{got:?} vs {}", w.threshold);
    assert_eq!(Some(got.f_c), brute_force(&w, &cfg));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn result_passes_recheck_and_matches_threshold(
        s_g in 50.0f64..400.0,
        d_g in 0.0f64..0.8,
        ratio in 2.0f64..20.0,
        gen in 20u64..400,
    ) {
        let w = workload(s_g, d_g, s_g * ratio, gen, 0);
        prop_assume!(w.threshold >= 16 && w.threshold < 8000);
        let cfg = TunerConfig { q_target: all_or_nothing(w.samples.len(), 1.959964), ..TunerConfig::default() };
        let got = select_interval(&w.samples, &w.params, &cfg).unwrap();
        prop_assert!(got.wilson >= cfg.q_target);
        prop_assert!(got.f_c <= w.threshold && w.threshold - got.f_c < cfg.granule);
    }

    #[test]
    fn monotone_in_target_and_confidence(
        gen in 20u64..200,
        q1 in 0.95f64..0.9995,
        q2 in 0.95f64..0.9995,
        z1 in 1.0f64..3.0,
        z2 in 1.0f64..3.0,
    ) {
        let w = workload(200.0, 0.3, 1500.0, gen, 0);
        let pick = |q: f64, z: f64| {
            select_interval(&w.samples, &w.params, &TunerConfig { q_target: q, z, ..TunerConfig::default() }).unwrap().f_c
        };
        let (qlo, qhi) = (q1.min(q2), q1.max(q2));
        prop_assert!(pick(qlo, 1.96) >= pick(qhi, 1.96));
        let (zlo, zhi) = (z1.min(z2), z1.max(z2));
        prop_assert!(pick(0.99, zhi) <= pick(0.99, zlo));
    }
}
