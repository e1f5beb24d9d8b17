//! Synthetic repair workloads as traces.
//!
//! A task is a valid program in which one declaration was generated inside
//! an `if` block, so a later top-level use is out of scope. Restarting at or
//! before the block (the root cause) lets the generator produce the correct
//! program with probability `q` per attempt; restarting after it reproduces
//! the same mistake.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::genkit::{Attempt, Emit, RuleMatch, TraceRule, TraceSpec};
use crate::minichecker::batch_check;
use crate::minichecker::synth::valid_program;
use crate::models::Belief;
use crate::proto::Offset;

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub trace: TraceSpec,
    pub correct: String,
    pub faulty: String,
    /// Start of the faulty block.
    pub root_cause: Offset,
    /// Offset of the out-of-scope use in the faulty program.
    pub error_at: Offset,
}

impl SyntheticTask {
    /// Realized normalized distance (e − r)/e.
    pub fn distance(&self) -> f64 {
        (self.error_at - self.root_cause) as f64 / self.error_at as f64
    }
}

/// Generator shape shared by the synthetic rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pace {
    pub bytes_per_second: f64,
    pub startup_delay_s: f64,
}

impl Default for Pace {
    fn default() -> Self {
        Pace { bytes_per_second: 179.0, startup_delay_s: 0.25 }
    }
}

const ATTEMPTS_SCRIPTED: u32 = 4;
const VAR: &str = "w0";

fn rule(min: Offset, max: Offset, attempt: Attempt, suffix_of: &str, pace: Pace, script: &[Vec<f64>]) -> TraceRule {
    TraceRule {
        when: RuleMatch { min_start: min, max_start: max, attempt },
        emit: Emit {
            text: None,
            suffix_of: Some(suffix_of.to_string()),
            bytes_per_second: pace.bytes_per_second,
            startup_delay_s: pace.startup_delay_s,
            logprob_script: (!script.is_empty()).then(|| script.to_vec()),
        },
    }
}

/// Line starts of top-level statements (not comments, not block ends).
fn insertion_points(src: &str) -> Vec<Offset> {
    let mut out = Vec::new();
    let mut at = 0;
    for line in src.split_inclusive('\n') {
        let first = line.as_bytes().first().copied();
        if matches!(first, Some(b) if !b.is_ascii_whitespace() && b != b'}' && b != b'/') {
            out.push(at as Offset);
        }
        at += line.len();
    }
    out
}

/// Draws a distance from the belief: a bin by mass, then uniformly between
/// the midpoints to its neighbours.
fn draw_distance(belief: &Belief, rng: &mut ChaCha8Rng) -> f64 {
    let bins = belief.bins();
    let u: f64 = rng.gen::<f64>() * belief.total();
    let mut acc = 0.0;
    let mut i = bins.len() - 1;
    for (j, (_, m)) in bins.iter().enumerate() {
        acc += m;
        if u < acc {
            i = j;
            break;
        }
    }
    let lo = if i == 0 { 0.0 } else { (bins[i - 1].0 + bins[i].0) / 2.0 };
    let hi = if i + 1 == bins.len() { 1.0 } else { (bins[i].0 + bins[i + 1].0) / 2.0 };
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// One synthetic task. `q` is the per-attempt chance that a restart at or
/// before the root cause produces the correct program.
pub fn synthetic_task(seed: u64, approx_len: usize, prior: &Belief, q: f64, pace: Pace) -> SyntheticTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a5c);
    let base = valid_program(seed, approx_len);
    let use_at = base.len();
    let points: Vec<Offset> = insertion_points(&base).into_iter().filter(|p| (*p as usize) < use_at).collect();
    let d = draw_distance(prior, &mut rng);
    let target = use_at as f64 * (1.0 - d);
    let r = points
        .iter()
        .copied()
        .min_by(|a, b| (*a as f64 - target).abs().total_cmp(&(*b as f64 - target).abs()))
        .unwrap_or(0) as usize;

    let decl = format!("let {VAR}: int = 5;\n");
    let block = format!("if 1 == 1 {{\n  let {VAR}: int = 5;\n}}\n");
    let use_line = format!("{VAR} = {VAR} + 1;\n");
    let build = |ins: &str| format!("{}{ins}{}{use_line}", &base[..r], &base[r..]);
    let correct = build(&decl);
    let faulty = build(&block);
    let error_at = (use_at + block.len()) as Offset;
    debug_assert!(batch_check(&correct).accepted());
    debug_assert_eq!(batch_check(&faulty).error.map(|e| e.off), Some(error_at));

    let script: Vec<Vec<f64>> = (0..64)
        .map(|_| {
            let p1: f64 = rng.gen_range(0.3..0.99);
            let p2 = (1.0 - p1) * rng.gen_range(0.2..0.9);
            vec![p1.ln(), p2.ln()]
        })
        .collect();

    let mut starts: Vec<Offset> = vec![0];
    starts.extend(batch_check(&correct).boundaries.iter().map(|(o, _)| *o).filter(|o| *o as usize <= r));
    starts.dedup();
    let mut rules = Vec::new();
    for &s in &starts {
        for k in 0..ATTEMPTS_SCRIPTED {
            let ok = rng.gen_bool(q);
            rules.push(rule(s, s, Attempt::Exact(k), if ok { &correct } else { &faulty }, pace, &script));
        }
    }
    rules.push(rule(0, r as Offset, Attempt::Any, &correct, pace, &script));
    rules.push(rule(0, Offset::MAX, Attempt::Any, &faulty, pace, &script));

    SyntheticTask {
        trace: TraceSpec {
            title: format!("synthetic-{seed}"),
            description: format!("root cause at {r}, error at {error_at}"),
            prompt: "Write a MiniLang program.\n".into(),
            rules,
        },
        correct,
        faulty,
        root_cause: r as Offset,
        error_at,
    }
}

/// `n` tasks with consecutive seeds from `seed`.
pub fn synthetic_corpus(n: usize, seed: u64, approx_len: usize, prior: &Belief, q: f64, pace: Pace) -> Vec<SyntheticTask> {
    (0..n as u64).map(|i| synthetic_task(seed + i, approx_len, prior, q, pace)).collect()
}

/// A program whose every attempt reproduces the same scope error.
pub fn always_failing(seed: u64, approx_len: usize, pace: Pace) -> TraceSpec {
    let mut t = synthetic_task(seed, approx_len, &Belief::default_prior(), 0.5, pace);
    let faulty = t.faulty.clone();
    t.trace.rules = vec![rule(0, Offset::MAX, Attempt::Any, &faulty, pace, &[])];
    t.trace
}

/// An error-free trace of a valid program.
pub fn error_free(seed: u64, approx_len: usize, pace: Pace) -> TraceSpec {
    let program = valid_program(seed, approx_len);
    TraceSpec {
        title: format!("clean-{seed}"),
        description: String::new(),
        prompt: "Write a MiniLang program.\n".into(),
        rules: vec![rule(0, Offset::MAX, Attempt::Any, &program, pace, &[])],
    }
}

/// Program text of the walkthrough: a fruit-count task in which `apples`
/// is declared inside an `if` block and used after it.
pub const WALKTHROUGH_FAULTY: &str = "// fruit distribution
// total fruit minus apples and oranges

let total: int = 30;
let text: str = \"5 apples and 6 oranges\";
let remaining: int = 0;
let seen: bool = text == \"\";
let label: str = \"fruit\";
let count: int = 0;
rec Basket { apples: int; oranges: int; }
let parsed: bool = 1 == 2;
if seen == parsed {
  let apples: int = 5;
  count = count + apples;
}
let oranges: int = 6;
count = count + oranges;
parsed = 1 == 1;
label = label + \" counted\";
let mangoes: int = 0;
let spare: int = 0;
remaining = total + apples;
remaining = remaining + mangoes;
let done: bool = parsed == seen;
label = label + \" done\";
spare = spare + 1;
count = count + spare;
let report: str = label;
remaining = remaining + spare;
";

/// The repaired program: `apples` is declared before the block.
pub const WALKTHROUGH_CORRECT: &str = "// fruit distribution
// total fruit minus apples and oranges

let total: int = 30;
let text: str = \"5 apples and 6 oranges\";
let remaining: int = 0;
let seen: bool = text == \"\";
let label: str = \"fruit\";
let count: int = 0;
rec Basket { apples: int; oranges: int; }
let parsed: bool = 1 == 2;
let apples: int = 5;
if seen == parsed {
  count = count + apples;
}
let oranges: int = 6;
count = count + oranges;
parsed = 1 == 1;
label = label + \" counted\";
let mangoes: int = 0;
let spare: int = 0;
remaining = total + apples;
remaining = remaining + mangoes;
let done: bool = parsed == seen;
label = label + \" done\";
spare = spare + 1;
count = count + spare;
let report: str = label;
remaining = remaining + spare;
";

/// Start of the `if` block in the faulty walkthrough program.
pub fn walkthrough_root_cause() -> Offset {
    WALKTHROUGH_FAULTY.find("if seen").expect("block present") as Offset
}

/// The walkthrough as a trace: the first attempt makes the scope mistake,
/// restarts after the block repeat it, restarts at or before the block fix
/// it.
pub fn walkthrough_trace() -> TraceSpec {
    let r = walkthrough_root_cause();
    let pace = Pace::default();
    TraceSpec {
        title: "fruit distribution".into(),
        description: "Return the fruit left after the apples and oranges named in the text.".into(),
        prompt: "Write a MiniLang program for the task.\n".into(),
        rules: vec![
            rule(0, 0, Attempt::Exact(0), WALKTHROUGH_FAULTY, pace, &[]),
            rule(0, r, Attempt::Any, WALKTHROUGH_CORRECT, pace, &[]),
            rule(0, Offset::MAX, Attempt::Any, WALKTHROUGH_FAULTY, pace, &[]),
        ],
    }
}
