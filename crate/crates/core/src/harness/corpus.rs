//! Task × seed sweeps and their summary statistics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use super::{run_task, HarnessError, Outcome, RunReport, TaskSpec};

/// Flat per-run row, as written to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub task: String,
    pub policy: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub latency_s: f64,
    pub bytes_generated: u64,
    pub rollouts_spawned: u64,
    pub checkpoints_created: u64,
    pub checkpoints_resumed: u64,
    pub static_ok: Option<bool>,
    pub error: Option<String>,
}

impl RunRow {
    fn of(r: &RunReport) -> Self {
        RunRow {
            task: r.task.clone(),
            policy: r.policy.clone(),
            seed: r.seed,
            outcome: r.outcome,
            latency_s: r.latency_s,
            bytes_generated: r.bytes_generated,
            rollouts_spawned: r.rollouts_spawned,
            checkpoints_created: r.checkpoints_created,
            checkpoints_resumed: r.checkpoints_resumed,
            static_ok: r.static_ok,
            error: r.error.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub policy: String,
    pub runs: usize,
    pub accepted: usize,
    pub timeouts: usize,
    pub failed: usize,
    /// Runs that could not be executed at all.
    pub errors: usize,
    pub latency_mean: f64,
    pub latency_p50: f64,
    pub latency_p75: f64,
    pub bytes_mean: f64,
    pub bytes_p50: f64,
    pub bytes_p75: f64,
    /// Accepted runs whose program passes the batch checker.
    pub static_correct: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusReport {
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
    #[serde(skip)]
    pub reports: Vec<RunReport>,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-policy statistics over executed runs.
pub fn aggregate(rows: &[RunRow]) -> Vec<Aggregate> {
    let mut by: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        by.entry(r.policy.as_str()).or_default().push(r);
    }
    by.into_iter()
        .map(|(policy, rs)| {
            let ran: Vec<&&RunRow> = rs.iter().filter(|r| r.error.is_none()).collect();
            let lat: Vec<f64> = ran.iter().map(|r| r.latency_s).collect();
            let bytes: Vec<f64> = ran.iter().map(|r| r.bytes_generated as f64).collect();
            let accepted: Vec<&&&RunRow> = ran.iter().filter(|r| r.outcome == Outcome::Accepted).collect();
            let count = |o: Outcome| ran.iter().filter(|r| r.outcome == o).count();
            Aggregate {
                policy: policy.to_string(),
                runs: rs.len(),
                accepted: accepted.len(),
                timeouts: count(Outcome::Timeout),
                failed: count(Outcome::Failed),
                errors: rs.len() - ran.len(),
                latency_mean: mean(&lat),
                latency_p50: quantile(&lat, 0.5),
                latency_p75: quantile(&lat, 0.75),
                bytes_mean: mean(&bytes),
                bytes_p50: quantile(&bytes, 0.5),
                bytes_p75: quantile(&bytes, 0.75),
                static_correct: (!accepted.is_empty()).then(|| {
                    accepted.iter().filter(|r| r.static_ok == Some(true)).count() as f64 / accepted.len() as f64
                }),
            }
        })
        .collect()
}

/// Runs every task under every seed. A task that cannot run becomes a
/// failed row carrying the error.
pub fn run_corpus(specs: &[TaskSpec], seeds: &[u64]) -> CorpusReport {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for spec in specs {
        for &seed in seeds {
            let s = spec.with_seed(seed);
            match run_task(&s) {
                Ok(r) => {
                    rows.push(RunRow::of(&r));
                    reports.push(r);
                }
                Err(e) => {
                    log::error!("task {} seed {seed}: {e}", spec.id);
                    rows.push(RunRow {
                        task: spec.id.clone(),
                        policy: spec.policy.name.clone(),
                        seed,
                        outcome: Outcome::Failed,
                        latency_s: 0.0,
                        bytes_generated: 0,
                        rollouts_spawned: 0,
                        checkpoints_created: 0,
                        checkpoints_resumed: 0,
                        static_ok: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    let aggregates = aggregate(&rows);
    CorpusReport { rows, aggregates, reports }
}

/// Writes `summary.json`, `runs.csv` and `events.ndjson` into `dir`.
pub fn write_corpus(report: &CorpusReport, dir: &Path) -> Result<(), HarnessError> {
    let io = |e: std::io::Error| HarnessError::Io(e.to_string());
    std::fs::create_dir_all(dir).map_err(io)?;
    let summary = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Io(e.to_string()))?;
    std::fs::write(dir.join("summary.json"), summary).map_err(io)?;

    let mut w = csv::Writer::from_path(dir.join("runs.csv")).map_err(|e| HarnessError::Io(e.to_string()))?;
    for r in &report.rows {
        w.serialize(r).map_err(|e| HarnessError::Io(e.to_string()))?;
    }
    w.flush().map_err(io)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("events.ndjson")).map_err(io)?);
    for r in &report.reports {
        for ev in &r.events {
            let mut v = json!(ev);
            v["task"] = json!(r.task);
            v["seed"] = json!(r.seed);
            writeln!(f, "{v}").map_err(io)?;
        }
    }
    f.flush().map_err(io)
}
