//! Orchestration: the manager loop tying generator streams to checker
//! sessions, the virtual and wall-clock drivers, corpus runs, the
//! speed-sweep simulation, and synthetic workloads.

mod corpus;
mod manager;
mod sweep;
pub mod synth;
mod virt;
mod wall;

pub use corpus::{aggregate, quantile, run_corpus, write_corpus, Aggregate, CorpusReport, RunRow};
pub use sweep::{attempts_of, speed_sweep, SweepAttempt, SweepCell, SweepGrid};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::genkit::{render, GenError, GenParams, HttpConfig, Templates, TraceSpec};
use crate::minichecker::{CheckpointPolicy, DEFAULT_INTERVAL};
use crate::models::{Belief, CostModelParams, ModelError};
use crate::policies::{PolicyConfig, PolicyError};
use crate::proto::Offset;
use crate::tuner::TunerConfig;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid task: {0}")]
    Config(String),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Io(String),
}

/// A trace given inline or as a path (relative to the task file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceRef {
    Path(PathBuf),
    Inline(TraceSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpConfig>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_bytes")]
    pub max_bytes: u64,
}

fn default_max_bytes() -> u64 {
    GenParams::default().max_bytes
}

impl GeneratorConfig {
    pub fn trace(spec: TraceSpec) -> Self {
        GeneratorConfig { trace: Some(TraceRef::Inline(spec)), http: None, temperature: 0.0, seed: 0, max_bytes: default_max_bytes() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckerConfig {
    /// Checkpoint interval in bytes; defaults to the fallback interval.
    pub interval: Option<u64>,
    pub prologue_checkpoint: bool,
}

impl Default for CheckerConfig {
    fn default() -> Self {
        CheckerConfig { interval: None, prologue_checkpoint: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySection {
    pub name: String,
    #[serde(flatten)]
    pub config: PolicyConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection { name: "tokpol".into(), config: PolicyConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Virtual,
    Wall,
}

fn default_timeout() -> f64 {
    300.0
}

fn default_concurrency() -> usize {
    8
}

fn default_template() -> String {
    "initial".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub generator: GeneratorConfig,
    #[serde(default = "default_template")]
    pub prompt_template: String,
    #[serde(default)]
    pub templates: Templates,
    #[serde(default)]
    pub checker: CheckerConfig,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub cost_model: CostModelParams,
    #[serde(default)]
    pub tuner: TunerConfig,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    /// Root-cause prior as a histogram file; the built-in prior otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PathBuf>,
}

impl TaskSpec {
    /// A virtual-clock task over an inline trace with default settings.
    pub fn from_trace(id: impl Into<String>, trace: TraceSpec, policy: &str) -> Self {
        TaskSpec {
            id: id.into(),
            title: String::new(),
            description: String::new(),
            generator: GeneratorConfig::trace(trace),
            prompt_template: default_template(),
            templates: Templates::default(),
            checker: CheckerConfig::default(),
            policy: PolicySection { name: policy.into(), config: PolicyConfig::default() },
            cost_model: CostModelParams::default(),
            tuner: TunerConfig::default(),
            timeout_s: default_timeout(),
            clock: ClockMode::Virtual,
            max_concurrency: default_concurrency(),
            prior: None,
        }
    }

    /// Reads a task file, inlining a trace given by path.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let mut spec: TaskSpec = serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        if let Some(TraceRef::Path(p)) = &spec.generator.trace {
            let full = if p.is_absolute() { p.clone() } else { dir.join(p) };
            spec.generator.trace = Some(TraceRef::Inline(TraceSpec::load(&full)?));
        }
        if let Some(p) = &spec.prior {
            if p.is_relative() {
                spec.prior = Some(dir.join(p));
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(format!("{}: {m}", self.id)));
        match (&self.generator.trace, &self.generator.http) {
            (Some(_), Some(_)) | (None, None) => return bad("set exactly one of generator.trace and generator.http"),
            (None, Some(_)) if self.clock == ClockMode::Virtual => return bad("the virtual clock needs a trace generator"),
            (Some(TraceRef::Path(p)), _) => return bad(&format!("trace path {} was not loaded", p.display())),
            (Some(TraceRef::Inline(t)), _) => t.check()?,
            _ => {}
        }
        if !(self.timeout_s > 0.0) {
            return bad("timeout_s must be positive");
        }
        if self.max_concurrency == 0 {
            return bad("max_concurrency must be at least 1");
        }
        if self.checker.interval == Some(0) {
            return bad("checker.interval must be positive");
        }
        if self.templates.get(&self.prompt_template).is_none() {
            return bad(&format!("unknown prompt template {:?}", self.prompt_template));
        }
        self.cost_model.validate()?;
        self.policy.config.validate()?;
        Ok(())
    }

    pub fn trace_spec(&self) -> Option<&TraceSpec> {
        match &self.generator.trace {
            Some(TraceRef::Inline(t)) => Some(t),
            _ => None,
        }
    }

    pub(crate) fn checkpoint_policy(&self) -> CheckpointPolicy {
        CheckpointPolicy::new(self.checker.interval.unwrap_or(DEFAULT_INTERVAL), self.checker.prologue_checkpoint)
    }

    pub(crate) fn prior_belief(&self) -> Result<Belief, HarnessError> {
        match &self.prior {
            Some(p) => Ok(Belief::load(p)?),
            None => Ok(Belief::default_prior()),
        }
    }

    /// Prompt sent ahead of the code: the trace prompt, or the rendered
    /// template for live generation.
    pub(crate) fn base_prompt(&self) -> String {
        match self.trace_spec() {
            Some(t) => t.prompt.clone(),
            None => render(
                self.templates.get(&self.prompt_template).unwrap_or_default(),
                &self.title,
                &self.description,
                "",
                "",
            ),
        }
    }

    /// The same task with the policy and generator seeded by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.policy.config.seed = seed;
        s.generator.seed = seed;
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Accepted,
    Timeout,
    Failed,
}

/// One line of the run's event log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRecord {
    pub t: f64,
    pub rollout: u64,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub off: Option<Offset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cat: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// One rollout as a repair attempt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttemptRecord {
    pub rollout: u64,
    /// Restart offset.
    pub c: Offset,
    /// Offset of the error the rollout was spawned to repair.
    pub e: Option<Offset>,
    /// Checker state the rollout resumed from.
    pub base: Offset,
    /// Furthest generated offset.
    pub end: Offset,
    pub status: String,
    /// Offset of the rollout's own error, if it failed.
    pub error_at: Option<Offset>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeSummary {
    pub nodes: usize,
    pub progress_nodes: usize,
    pub error_nodes: usize,
    pub live_checkpoints: usize,
    pub deepest_progress: Offset,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub task: String,
    pub policy: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub latency_s: f64,
    pub bytes_generated: u64,
    pub rollouts_spawned: u64,
    pub checkpoints_created: u64,
    pub checkpoints_resumed: u64,
    /// Accepted program, or the deepest accepted prefix otherwise.
    pub program: String,
    /// Whether the accepted program passes the batch checker.
    pub static_ok: Option<bool>,
    /// Fraction of resumed repairs whose replay keeps up with generation
    /// under the cost model, using the realized checkpoint positions.
    pub realized_catch_up: Option<f64>,
    pub tree: TreeSummary,
    pub attempts: Vec<AttemptRecord>,
    pub events: Vec<EventRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub tree_json: serde_json::Value,
}

/// Runs one task to acceptance, timeout or exhaustion.
pub fn run_task(spec: &TaskSpec) -> Result<RunReport, HarnessError> {
    spec.validate()?;
    match spec.clock {
        ClockMode::Virtual => virt::run(spec),
        ClockMode::Wall => wall::run(spec),
    }
}
