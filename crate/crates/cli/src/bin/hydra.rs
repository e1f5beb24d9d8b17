use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use hydra_core::harness::synth::{synthetic_corpus, walkthrough_trace, Pace};
use hydra_core::harness::{
    attempts_of, run_corpus, run_task, speed_sweep, write_corpus, ClockMode, RunReport, SweepAttempt, SweepGrid,
    TaskSpec,
};
use hydra_core::models::{Belief, CostModelParams};
use hydra_core::policies::POLICY_NAMES;
use hydra_core::tuner::{load_samples, select_interval, TunerConfig};

#[derive(Parser, Debug)]
#[command(version, about = "Checkpoint-and-rollback code generation runtime")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Debug, Clone)]
struct Overrides {
    /// Replace the task's policy.
    #[arg(long)]
    policy: Option<String>,
    /// Seed for the policy and generator.
    #[arg(long)]
    seed: Option<u64>,
    /// Force the virtual or wall clock.
    #[arg(long, value_parser = ["virtual", "wall"])]
    clock: Option<String>,
}

impl Overrides {
    fn apply(&self, mut spec: TaskSpec) -> TaskSpec {
        if let Some(p) = &self.policy {
            spec.policy.name = p.clone();
        }
        if let Some(s) = self.seed {
            spec = spec.with_seed(s);
        }
        match self.clock.as_deref() {
            Some("wall") => spec.clock = ClockMode::Wall,
            Some("virtual") => spec.clock = ClockMode::Virtual,
            _ => {}
        }
        spec
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run one task and print its summary as JSON.
    Run {
        #[arg(long)]
        task: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Write the event log as newline-delimited JSON.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Write the final search tree as JSON.
        #[arg(long)]
        dump_tree: Option<PathBuf>,
        /// Write the full report, events included.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run every `*.task.json` in a directory under several seeds.
    Bench {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Comma-separated policies; each task runs under each. Defaults to
        /// the policy in the task file.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Re-time recorded attempts under other generator and checker speeds.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        /// `attempts.json` written by `bench`.
        #[arg(long)]
        attempts: PathBuf,
    },
    /// Pick the checkpoint interval from repair samples.
    TuneInterval {
        /// JSON array of `{c, e}`.
        #[arg(long)]
        samples: PathBuf,
        /// JSON with optional `cost_model` and `tuner` sections.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long = "Q")]
        q: Option<f64>,
    },
    /// Run one task and write its search tree.
    DumpTree {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic repair corpus as task and trace files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Approximate program length in bytes.
        #[arg(long, default_value_t = 800)]
        len: usize,
        /// Per-attempt success chance once the root cause is reached.
        #[arg(long, default_value_t = 0.5)]
        q: f64,
        #[arg(long, default_value = "tokpol")]
        policy: String,
        /// Also write the fruit-count walkthrough.
        #[arg(long)]
        walkthrough: bool,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

/// Prints to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn summary(r: &RunReport) -> Result<Value> {
    let mut v = serde_json::to_value(r)?;
    if let Some(m) = v.as_object_mut() {
        m.remove("events");
        m.remove("attempts");
    }
    Ok(v)
}

fn load_task(path: &Path, o: &Overrides) -> Result<TaskSpec> {
    let spec = TaskSpec::load(path).with_context(|| format!("loading task {}", path.display()))?;
    Ok(o.apply(spec))
}

fn cmd_run(task: &Path, o: &Overrides, events: Option<&Path>, tree: Option<&Path>, full: Option<&Path>) -> Result<()> {
    let spec = load_task(task, o)?;
    let r = run_task(&spec)?;
    if let Some(p) = events {
        let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
        for ev in &r.events {
            writeln!(f, "{}", serde_json::to_string(ev)?)?;
        }
        f.flush()?;
    }
    if let Some(p) = tree {
        write_json(p, &r.tree_json)?;
    }
    if let Some(p) = full {
        write_json(p, &r)?;
    }
    emit(&serde_json::to_string_pretty(&summary(&r)?)?)?;
    Ok(())
}

fn task_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".task.json")))
        .collect();
    out.sort();
    Ok(out)
}

fn cmd_bench(corpus: &Path, seeds: u64, policies: &[String], out: &Path) -> Result<()> {
    let files = task_files(corpus)?;
    if files.is_empty() {
        bail!("no *.task.json files in {}", corpus.display());
    }
    for p in policies {
        if !POLICY_NAMES.contains(&p.as_str()) {
            bail!("unknown policy {p:?}; expected one of {POLICY_NAMES:?}");
        }
    }
    let mut specs = Vec::new();
    for f in &files {
        let spec = TaskSpec::load(f).with_context(|| format!("loading task {}", f.display()))?;
        if policies.is_empty() {
            specs.push(spec);
        } else {
            for p in policies {
                let mut s = spec.clone();
                s.policy.name = p.clone();
                specs.push(s);
            }
        }
    }
    let seeds: Vec<u64> = (0..seeds).collect();
    log::info!("{} tasks x {} seeds", specs.len(), seeds.len());
    let report = run_corpus(&specs, &seeds);
    write_corpus(&report, out)?;
    let attempts: Vec<Value> = report
        .reports
        .iter()
        .map(|r| json!({ "task": r.task, "policy": r.policy, "seed": r.seed, "attempts": attempts_of(r) }))
        .collect();
    write_json(&out.join("attempts.json"), &attempts)?;
    emit(&serde_json::to_string_pretty(&report.aggregates)?)?;
    Ok(())
}

#[derive(Deserialize)]
struct RecordedRun {
    attempts: Vec<SweepAttempt>,
}

fn cmd_sweep(grid: &Path, attempts: &Path) -> Result<()> {
    let grid: SweepGrid = read_json(grid)?;
    let runs: Vec<RecordedRun> = read_json(attempts)?;
    let traces: Vec<Vec<SweepAttempt>> = runs.into_iter().map(|r| r.attempts).collect();
    let cells = speed_sweep(&traces, &grid)?;
    emit(&serde_json::to_string_pretty(&cells)?)?;
    Ok(())
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct TuneParams {
    cost_model: CostModelParams,
    tuner: TunerConfig,
}

fn cmd_tune(samples: &Path, params: Option<&Path>, q: Option<f64>) -> Result<()> {
    let mut p: TuneParams = match params {
        Some(path) => read_json(path)?,
        None => TuneParams::default(),
    };
    if let Some(q) = q {
        p.tuner.q_target = q;
    }
    let samples = load_samples(samples)?;
    let choice = select_interval(&samples, &p.cost_model, &p.tuner)?;
    emit(&serde_json::to_string(&choice)?)?;
    Ok(())
}

fn cmd_synth(out: &Path, n: usize, seed: u64, len: usize, q: f64, policy: &str, walk: bool) -> Result<()> {
    if !POLICY_NAMES.contains(&policy) {
        bail!("unknown policy {policy:?}");
    }
    std::fs::create_dir_all(out)?;
    let mut traces: Vec<(String, hydra_core::genkit::TraceSpec)> =
        synthetic_corpus(n, seed, len, &Belief::default_prior(), q, Pace::default())
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("synth-{i:03}"), t.trace))
            .collect();
    if walk {
        traces.push(("walkthrough".into(), walkthrough_trace()));
    }
    for (id, trace) in &traces {
        write_json(&out.join(format!("{id}.trace.json")), trace)?;
        let task = json!({
            "id": id,
            "title": trace.title,
            "generator": { "trace": format!("{id}.trace.json") },
            "policy": { "name": policy },
        });
        write_json(&out.join(format!("{id}.task.json")), &task)?;
    }
    log::info!("wrote {} tasks to {}", traces.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Run { task, overrides, events, dump_tree, report } => {
            cmd_run(&task, &overrides, events.as_deref(), dump_tree.as_deref(), report.as_deref())
        }
        Cmd::Bench { corpus, seeds, policies, out } => cmd_bench(&corpus, seeds, &policies, &out),
        Cmd::Sweep { grid, attempts } => cmd_sweep(&grid, &attempts),
        Cmd::TuneInterval { samples, params, q } => cmd_tune(&samples, params.as_deref(), q),
        Cmd::DumpTree { task, out, overrides } => {
            let r = run_task(&load_task(&task, &overrides)?)?;
            write_json(&out, &r.tree_json)
        }
        Cmd::Synth { out, n, seed, len, q, policy, walkthrough } => {
            cmd_synth(&out, n, seed, len, q, &policy, walkthrough)
        }
    }
}
