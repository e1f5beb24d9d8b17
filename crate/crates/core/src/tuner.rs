//! Checkpoint-interval selection: the largest interval for which the checker
//! still catches up with the generator on a target fraction of repairs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::models::{Belief, CostModelParams, ModelError};
use crate::proto::Offset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairSample {
    pub c: Offset,
    pub e: Offset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TunerConfig {
    /// Target catch-up fraction.
    #[serde(rename = "Q")]
    pub q_target: f64,
    pub z: f64,
    pub f_min: u64,
    pub f_max: u64,
    /// Spacing of tested intervals.
    pub granule: u64,
    /// Synthetic samples to draw when no recorded samples are given.
    pub samples: usize,
    /// Offset of the first checkpoint (end of the prologue).
    pub prologue: Offset,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig { q_target: 0.99, z: 1.959964, f_min: 16, f_max: 65536, granule: 16, samples: 2000, prologue: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TunerError {
    #[error("no samples")]
    NoSamples,
    #[error("invalid tuner config: {0}")]
    Config(String),
    #[error("zero trials")]
    ZeroTrials,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot read samples: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalChoice {
    pub f_c: u64,
    pub wilson: f64,
    pub successes: usize,
    pub trials: usize,
    /// True when even `f_min` misses the target.
    pub infeasible: bool,
}

/// Offset of the last checkpoint at or before `c`: the prologue, then every
/// `f` bytes after it. Rollbacks into the prologue replay from 0.
pub fn placement(c: Offset, prologue: Offset, f: u64) -> Offset {
    if c < prologue {
        return 0;
    }
    prologue + (c - prologue) / f * f
}

/// Whether replay from a(c) to e finishes no later than regenerating c..e.
pub fn catch_up(s: RepairSample, f: u64, prologue: Offset, p: &CostModelParams) -> Result<bool, ModelError> {
    if s.c >= s.e {
        return Err(ModelError::Domain { c: s.c, e: s.e });
    }
    let a = placement(s.c, prologue, f);
    let p = CostModelParams { f_c: f as f64, ..*p };
    Ok(p.l_c((s.e - a) as f64) <= p.l_g((s.e - s.c) as f64))
}

/// Lower end of the Wilson score interval.
pub fn wilson_lower(successes: usize, trials: usize, z: f64) -> Result<f64, TunerError> {
    if trials == 0 {
        return Err(TunerError::ZeroTrials);
    }
    let n = trials as f64;
    let ph = successes as f64 / n;
    let z2 = z * z;
    let centre = ph + z2 / (2.0 * n);
    let spread = z * (ph * (1.0 - ph) / n + z2 / (4.0 * n * n)).sqrt();
    Ok((centre - spread) / (1.0 + z2 / n))
}

fn evaluate(samples: &[RepairSample], f: u64, p: &CostModelParams, cfg: &TunerConfig) -> Result<(usize, f64), TunerError> {
    let mut ok = 0;
    for s in samples {
        if catch_up(*s, f, cfg.prologue, p)? {
            ok += 1;
        }
    }
    Ok((ok, wilson_lower(ok, samples.len(), cfg.z)?))
}

/// Bisects the grid `f_min + k·granule` for the largest feasible interval.
pub fn select_interval(
    samples: &[RepairSample],
    p: &CostModelParams,
    cfg: &TunerConfig,
) -> Result<IntervalChoice, TunerError> {
    if samples.is_empty() {
        return Err(TunerError::NoSamples);
    }
    if !(cfg.q_target > 0.0 && cfg.q_target < 1.0) || cfg.f_min == 0 || cfg.f_min > cfg.f_max || cfg.granule == 0 {
        return Err(TunerError::Config(format!("{cfg:?}")));
    }
    let at = |k: u64| cfg.f_min + k * cfg.granule;
    let choice = |k: u64, (ok, w): (usize, f64), infeasible| IntervalChoice {
        f_c: at(k),
        wilson: w,
        successes: ok,
        trials: samples.len(),
        infeasible,
    };
    let top = (cfg.f_max - cfg.f_min) / cfg.granule;

    let hi_eval = evaluate(samples, at(top), p, cfg)?;
    if hi_eval.1 >= cfg.q_target {
        return Ok(choice(top, hi_eval, false));
    }
    let lo_eval = evaluate(samples, at(0), p, cfg)?;
    if lo_eval.1 < cfg.q_target {
        log::warn!("checkpoint interval {} already misses the catch-up target", cfg.f_min);
        return Ok(choice(0, lo_eval, true));
    }
    let (mut lo, mut hi, mut best) = (0, top, lo_eval);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let ev = evaluate(samples, at(mid), p, cfg)?;
        if ev.1 >= cfg.q_target {
            lo = mid;
            best = ev;
        } else {
            hi = mid;
        }
    }
    Ok(choice(lo, best, false))
}

/// Draws `n` samples: `e` uniformly from `error_offsets`, and the rollback
/// distance from `belief` (uniform within the chosen bin).
pub fn synthetic_samples(belief: &Belief, error_offsets: &[Offset], n: usize, seed: u64) -> Vec<RepairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = belief.bins();
    // Bin edges halfway between centers.
    let edges: Vec<(f64, f64)> = (0..bins.len())
        .map(|i| {
            let lo = if i == 0 { 0.0 } else { (bins[i - 1].0 + bins[i].0) / 2.0 };
            let hi = if i + 1 == bins.len() { 1.0 } else { (bins[i].0 + bins[i + 1].0) / 2.0 };
            (lo, hi)
        })
        .collect();
    let usable: Vec<Offset> = error_offsets.iter().copied().filter(|e| *e > 0).collect();
    if usable.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let e = usable[rng.gen_range(0..usable.len())];
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut bin = bins.len() - 1;
            for (i, (_, m)) in bins.iter().enumerate() {
                acc += m;
                if u < acc {
                    bin = i;
                    break;
                }
            }
            let (lo, hi) = edges[bin];
            let d = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let back = ((d * e as f64).round() as Offset).clamp(1, e);
            RepairSample { c: e - back, e }
        })
        .collect()
}

/// Reads a JSON array of `{c, e}` objects.
pub fn load_samples(path: &Path) -> Result<Vec<RepairSample>, TunerError> {
    let text = std::fs::read_to_string(path).map_err(|e| TunerError::Io(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| TunerError::Io(e.to_string()))
}
