//! Re-timing recorded rollback traces under the latency model for other
//! generator and checker speeds, with and without checkpoints.

use serde::{Deserialize, Serialize};

use super::{HarnessError, RunReport};
use crate::models::CostModelParams;
use crate::proto::Offset;
use crate::tuner::placement;

/// One rollout of a recorded run: restart offset `c`, the offset `e` it
/// had to get back to (equal to `c` for a fresh start), and the furthest
/// offset it generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepAttempt {
    pub c: Offset,
    pub e: Offset,
    pub end: Offset,
}

/// Attempts of a run, in spawn order.
pub fn attempts_of(report: &RunReport) -> Vec<SweepAttempt> {
    report
        .attempts
        .iter()
        .map(|a| SweepAttempt { c: a.c, e: a.e.unwrap_or(a.c).max(a.c), end: a.end.max(a.c) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub s_g: Vec<f64>,
    pub s_c: Vec<f64>,
    /// End of the prologue, where the first checkpoint sits.
    #[serde(default)]
    pub prologue: Offset,
    /// Remaining model constants.
    #[serde(default)]
    pub base: CostModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub s_g: f64,
    pub s_c: f64,
    pub latency_enabled: f64,
    pub latency_disabled: f64,
    /// Disabled over enabled latency.
    pub speedup: f64,
}

/// Time for one attempt. Until the attempt is back at `e` (or stops
/// earlier), generation and checker replay race; past that point the
/// checker keeps pace and only generation counts.
fn attempt_latency(a: &SweepAttempt, p: &CostModelParams, prologue: Offset, checkpoints: bool) -> f64 {
    let m = a.e.min(a.end);
    let gen = p.l_g((m - a.c) as f64);
    let check = if checkpoints {
        let base = placement(a.c, prologue, p.f_c as u64);
        p.l_c((m - base) as f64)
    } else {
        m as f64 / p.s_c + p.d_c
    };
    gen.max(check) + (a.end - m) as f64 / p.s_g
}

pub fn speed_sweep(traces: &[Vec<SweepAttempt>], grid: &SweepGrid) -> Result<Vec<SweepCell>, HarnessError> {
    if traces.iter().all(|t| t.is_empty()) {
        return Err(HarnessError::Config("speed sweep needs at least one recorded attempt".into()));
    }
    let mut cells = Vec::new();
    for &s_g in &grid.s_g {
        for &s_c in &grid.s_c {
            let p = CostModelParams { s_g, s_c, ..grid.base };
            p.validate()?;
            let total = |on: bool| -> f64 {
                traces.iter().flatten().map(|a| attempt_latency(a, &p, grid.prologue, on)).sum()
            };
            let (en, dis) = (total(true), total(false));
            cells.push(SweepCell { s_g, s_c, latency_enabled: en, latency_disabled: dis, speedup: dis / en });
        }
    }
    Ok(cells)
}
