//! Generator side: requests, streamed chunks, the trace-driven simulated
//! generator and a streaming HTTP completions adapter.

mod http;
mod trace;

pub use http::{HttpConfig, HttpGenerator};
pub use trace::{split_tokens, Attempt, Emit, Plan, PlannedChunk, RuleMatch, TraceGenerator, TraceRule, TraceSpec};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub temperature: f64,
    pub seed: u64,
    pub max_bytes: u64,
    pub want_logprobs: bool,
    pub top_k: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams { temperature: 0.0, seed: 0, max_bytes: 1 << 20, want_logprobs: false, top_k: 128 }
    }
}

/// A generation request: the model sees `prompt`, then the reused code
/// `prefix`, then the optional feedback comment, and continues from there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub prefix: String,
    pub feedback: Option<String>,
    pub params: GenParams,
}

impl GenRequest {
    pub fn initial(prompt: impl Into<String>, params: GenParams) -> Self {
        GenRequest { prompt: prompt.into(), prefix: String::new(), feedback: None, params }
    }

    /// Offset in the code stream at which generation starts.
    pub fn start_offset(&self) -> u64 {
        self.prefix.len() as u64
    }

    /// Text actually sent to the model.
    pub fn materialize(&self) -> String {
        let mut s = String::with_capacity(self.prompt.len() + self.prefix.len() + 64);
        s.push_str(&self.prompt);
        s.push_str(&self.prefix);
        if let Some(f) = &self.feedback {
            s.push_str(f);
        }
        s
    }
}

/// Top-k log-probabilities of one token starting `at` bytes into a chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub at: usize,
    pub top: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenChunk {
    pub bytes: String,
    pub logprobs: Option<Vec<TokenLogprobs>>,
    /// Seconds since the request was issued.
    pub at: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("no trace rule matches start offset {start} at attempt {attempt}")]
    NoRule { start: u64, attempt: u32 },
    #[error("invalid trace: {0}")]
    Trace(String),
    #[error("http: {0}")]
    Http(String),
    #[error("cancelled")]
    Cancelled,
}

/// The feedback line placed after the reused prefix.
pub fn feedback_comment(cat: &str, diag: &str) -> String {
    let diag = diag.replace(['\n', '\r'], " ");
    format!("// checker: {cat}: {diag}\n")
}

/// Request for a rollout restarting from a node with accepted bytes
/// `prefix`, repairing the error `(cat, diag)`.
pub fn build_repair_request(base_prompt: &str, prefix: &str, error: Option<(&str, &str)>, params: GenParams) -> GenRequest {
    GenRequest {
        prompt: base_prompt.to_string(),
        prefix: prefix.to_string(),
        feedback: error.map(|(cat, diag)| feedback_comment(cat, diag)),
        params,
    }
}

/// Prompt templates; `{title}`, `{description}`, `{code}` and
/// `{compiler_errors}` are substituted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Templates {
    pub initial: String,
    pub regenerate: String,
    pub edit: String,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            initial: DEFAULT_INITIAL.to_string(),
            regenerate: DEFAULT_REGENERATE.to_string(),
            edit: DEFAULT_EDIT.to_string(),
        }
    }
}

impl Templates {
    pub fn get(&self, id: &str) -> Option<&str> {
        match id {
            "initial" | "repair" => Some(&self.initial),
            "regenerate" => Some(&self.regenerate),
            "edit" => Some(&self.edit),
            _ => None,
        }
    }
}

pub fn render(template: &str, title: &str, description: &str, code: &str, errors: &str) -> String {
    template
        .replace("{title}", title)
        .replace("{description}", description)
        .replace("{code}", code)
        .replace("{compiler_errors}", errors)
}

const DEFAULT_INITIAL: &str = "Overview:
- Write a complete MiniLang program for the task below.

Requirements:
- Answer with the program text only, with no explanation around it.
- Every identifier must be declared before use, in an enclosing scope.

Task: {title}

{description}
";

const DEFAULT_REGENERATE: &str = "Overview:
- The MiniLang program below was meant to solve the task but fails the checker.
- Write a corrected program that passes the checker and solves the task.

Requirements:
- Answer with the full corrected program only, with no explanation around it.

Task: {title}

{description}

Program:
{code}

Checker errors:
{compiler_errors}
";

const DEFAULT_EDIT: &str = "Overview:
- The MiniLang program below was meant to solve the task but fails the checker.
- Answer with SEARCH/REPLACE edits that make it pass the checker.

Requirements:
- Answer with the edit blocks only, with no explanation around them.
- Each SEARCH block must match exactly one run of complete lines, indentation included.
- An empty replacement deletes the matched lines. Blocks apply in order.

Example:
<<<<<<< SEARCH
let n: int = 0;
=======
let n: int = 1;
>>>>>>> REPLACE

Task: {title}

{description}

Program:
{code}

Checker errors:
{compiler_errors}
";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_follows_prefix() {
        let r = build_repair_request(
            "P\n",
            "let x: int = 1;\n",
            Some(("type_mismatch", "expected int, found str")),
            GenParams::default(),
        );
        assert!(r.materialize().starts_with("P\nlet x: int = 1;\n"));
        assert!(r.materialize().ends_with("// checker: type_mismatch: expected int, found str\n"));
        assert_eq!(r.start_offset(), 16);
    }

    #[test]
    fn undeclared_feedback_line() {
        assert_eq!(
            feedback_comment("undeclared_identifier", "use of undeclared identifier a"),
            "// checker: undeclared_identifier: use of undeclared identifier a\n"
        );
        assert_eq!(feedback_comment("c", "two\nlines"), "// checker: c: two lines\n");
    }

    #[test]
    fn root_restart_and_purity() {
        let e = Some(("syntax_error", "expected ;"));
        let a = build_repair_request("P", "", e, GenParams::default());
        assert_eq!(a.materialize(), "P// checker: syntax_error: expected ;\n");
        let b = build_repair_request("P", "", e, GenParams::default());
        assert_eq!(a, b);
    }

    #[test]
    fn templates_render() {
        let t = Templates::default();
        let s = render(t.get("regenerate").unwrap(), "Sum", "Add numbers.", "let a: int = ;", "syntax_error");
        assert!(s.contains("Task: Sum") && s.contains("let a: int = ;") && s.contains("syntax_error"));
        assert!(!s.contains('{'));
        assert!(t.get("nope").is_none());
    }
}
