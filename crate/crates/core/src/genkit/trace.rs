//! Deterministic stand-in for a model: scripted outputs keyed by restart
//! offset and attempt number, paced at a fixed byte rate.

use std::collections::HashMap;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use super::{GenError, GenRequest};
use crate::proto::Offset;

/// Which attempt a rule applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Attempt {
    #[default]
    Any,
    Exact(u32),
}

impl Serialize for Attempt {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Attempt::Any => s.serialize_str("any"),
            Attempt::Exact(n) => s.serialize_u32(*n),
        }
    }
}

impl<'de> Deserialize<'de> for Attempt {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) if s == "any" => Ok(Attempt::Any),
            serde_json::Value::Number(n) => n
                .as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .map(Attempt::Exact)
                .ok_or_else(|| de::Error::custom("attempt must be a small non-negative integer")),
            other => Err(de::Error::custom(format!("attempt must be \"any\" or an integer, got {other}"))),
        }
    }
}

fn is_max(o: &Offset) -> bool {
    *o == Offset::MAX
}

fn max_offset() -> Offset {
    Offset::MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleMatch {
    #[serde(default)]
    pub min_start: Offset,
    #[serde(default = "max_offset", skip_serializing_if = "is_max")]
    pub max_start: Offset,
    #[serde(default)]
    pub attempt: Attempt,
}

impl RuleMatch {
    fn matches(&self, start: Offset, attempt: u32) -> bool {
        (self.min_start..=self.max_start).contains(&start)
            && match self.attempt {
                Attempt::Any => true,
                Attempt::Exact(n) => n == attempt,
            }
    }

    fn is_catch_all(&self) -> bool {
        self.min_start == 0 && self.max_start == Offset::MAX && self.attempt == Attempt::Any
    }
}

/// Output of a rule. Exactly one of `text` (emitted verbatim) and
/// `suffix_of` (a whole program; the bytes from the start offset on are
/// emitted) must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suffix_of: Option<String>,
    pub bytes_per_second: f64,
    #[serde(default)]
    pub startup_delay_s: f64,
    /// Top-k log-probabilities per emitted token, cycled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_script: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRule {
    #[serde(rename = "match")]
    pub when: RuleMatch,
    pub emit: Emit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub prompt: String,
    pub rules: Vec<TraceRule>,
}

impl TraceSpec {
    pub fn load(path: &Path) -> Result<Self, GenError> {
        let text = std::fs::read_to_string(path).map_err(|e| GenError::Trace(format!("{}: {e}", path.display())))?;
        let spec: TraceSpec = serde_json::from_str(&text).map_err(|e| GenError::Trace(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }

    /// Structural checks. A missing catch-all rule is only logged: such a
    /// trace fails at generation time if an unmatched start comes up.
    pub fn check(&self) -> Result<(), GenError> {
        if self.rules.is_empty() {
            return Err(GenError::Trace("no rules".into()));
        }
        for (i, r) in self.rules.iter().enumerate() {
            if r.emit.text.is_some() == r.emit.suffix_of.is_some() {
                return Err(GenError::Trace(format!("rule {i}: set exactly one of text and suffix_of")));
            }
            if !(r.emit.bytes_per_second > 0.0) || r.emit.startup_delay_s < 0.0 {
                return Err(GenError::Trace(format!("rule {i}: bad pacing")));
            }
            if r.when.min_start > r.when.max_start {
                return Err(GenError::Trace(format!("rule {i}: empty start range")));
            }
            if r.emit.logprob_script.as_ref().is_some_and(|s| s.is_empty()) {
                return Err(GenError::Trace(format!("rule {i}: empty logprob script")));
            }
        }
        if !self.rules.last().unwrap().when.is_catch_all() {
            log::warn!("trace has no trailing catch-all rule");
        }
        Ok(())
    }
}

/// Splits text into model-like tokens: identifier/number runs, whitespace
/// runs, and single other characters.
pub fn split_tokens(text: &str) -> Vec<&str> {
    #[derive(PartialEq)]
    enum K {
        Word,
        Space,
        Other,
    }
    let kind = |c: char| {
        if c.is_alphanumeric() || c == '_' {
            K::Word
        } else if c.is_whitespace() {
            K::Space
        } else {
            K::Other
        }
    };
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev: Option<K> = None;
    for (i, c) in text.char_indices() {
        let k = kind(c);
        let cont = matches!((&prev, &k), (Some(K::Word), K::Word) | (Some(K::Space), K::Space));
        if !cont && i > start {
            out.push(&text[start..i]);
            start = i;
        }
        prev = Some(k);
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedChunk {
    /// Seconds after the request.
    pub at: f64,
    pub bytes: String,
    pub logprobs: Option<Vec<f64>>,
}

/// The full, deterministic output of one generation request.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub chunks: Vec<PlannedChunk>,
    /// Seconds after the request at which the stream ends.
    pub end_at: f64,
    pub rule: usize,
    pub attempt: u32,
}

impl Plan {
    pub fn bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.bytes.len() as u64).sum()
    }
}

/// Serves a [`TraceSpec`], counting attempts per exact start offset.
#[derive(Debug, Clone)]
pub struct TraceGenerator {
    spec: TraceSpec,
    attempts: HashMap<Offset, u32>,
}

impl TraceGenerator {
    pub fn new(spec: TraceSpec) -> Self {
        TraceGenerator { spec, attempts: HashMap::new() }
    }

    pub fn spec(&self) -> &TraceSpec {
        &self.spec
    }

    pub fn plan(&mut self, req: &GenRequest) -> Result<Plan, GenError> {
        let start = req.start_offset();
        let counter = self.attempts.entry(start).or_insert(0);
        let attempt = *counter;
        *counter += 1;
        let (idx, rule) = self
            .spec
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.when.matches(start, attempt))
            .ok_or(GenError::NoRule { start, attempt })?;
        let emit = &rule.emit;
        let mut text: &str = match (&emit.text, &emit.suffix_of) {
            (Some(t), _) => t,
            (None, Some(full)) => full
                .get(start as usize..)
                .ok_or_else(|| GenError::Trace(format!("rule {idx}: start {start} is outside suffix_of")))?,
            (None, None) => return Err(GenError::Trace(format!("rule {idx}: nothing to emit"))),
        };
        if text.len() as u64 > req.params.max_bytes {
            let mut cut = req.params.max_bytes as usize;
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            text = &text[..cut];
        }
        let mut chunks = Vec::new();
        let mut sent = 0usize;
        for (i, tok) in split_tokens(text).into_iter().enumerate() {
            sent += tok.len();
            let logprobs = req.params.want_logprobs.then(|| match &emit.logprob_script {
                Some(script) => script[i % script.len()].clone(),
                None => vec![0.0],
            });
            chunks.push(PlannedChunk {
                at: emit.startup_delay_s + sent as f64 / emit.bytes_per_second,
                bytes: tok.to_string(),
                logprobs,
            });
        }
        let end_at = emit.startup_delay_s + sent as f64 / emit.bytes_per_second;
        Ok(Plan { chunks, end_at, rule: idx, attempt })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genkit::GenParams;

    fn spec(json: &str) -> TraceSpec {
        let s: TraceSpec = serde_json::from_str(json).unwrap();
        s.check().unwrap();
        s
    }

    const ONE: &str = r#"{"prompt": "p", "rules": [
        {"match": {"min_start": 0, "max_start": 0, "attempt": "any"},
         "emit": {"text": "let x: int = 1;", "bytes_per_second": 100, "startup_delay_s": 0.5}}]}"#;

    #[test]
    fn pacing_arithmetic() {
        let mut g = TraceGenerator::new(spec(ONE));
        let plan = g.plan(&GenRequest::initial("p", GenParams::default())).unwrap();
        assert_eq!(plan.bytes(), 15);
        assert!((plan.end_at - 0.65).abs() < 1e-12);
        assert!((plan.chunks.last().unwrap().at - 0.65).abs() < 1e-12);
        let joined: String = plan.chunks.iter().map(|c| c.bytes.as_str()).collect();
        assert_eq!(joined, "let x: int = 1;");
        assert!(plan.chunks.iter().all(|c| c.logprobs.is_none()));
    }

    #[test]
    fn attempts_count_per_start_and_stay_deterministic() {
        let mut g = TraceGenerator::new(spec(ONE));
        let req = GenRequest::initial("p", GenParams::default());
        let a = g.plan(&req).unwrap();
        let b = g.plan(&req).unwrap();
        assert_eq!((a.attempt, b.attempt), (0, 1));
        assert_eq!(a.chunks, b.chunks);
        let far = GenRequest { prefix: "abc".into(), ..req };
        assert!(matches!(g.plan(&far), Err(GenError::NoRule { start: 3, attempt: 0 })));
    }

    #[test]
    fn first_match_wins_and_suffix_of() {
        let s = spec(
            r#"{"prompt": "p", "rules": [
            {"match": {"min_start": 0, "max_start": 20, "attempt": 0},
             "emit": {"text": "bad", "bytes_per_second": 10}},
            {"match": {"attempt": "any"},
             "emit": {"suffix_of": "let a: int = 1;\nlet b: int = a;\n", "bytes_per_second": 10,
                      "logprob_script": [[-0.1], [-0.7, -1.2]]}}]}"#,
        );
        let mut g = TraceGenerator::new(s);
        let mut req = GenRequest::initial("p", GenParams { want_logprobs: true, ..GenParams::default() });
        req.prefix = "let a: int = 1;\n".into();
        let first = g.plan(&req).unwrap();
        assert_eq!(first.rule, 0);
        let second = g.plan(&req).unwrap();
        assert_eq!(second.rule, 1);
        let joined: String = second.chunks.iter().map(|c| c.bytes.as_str()).collect();
        assert_eq!(joined, "let b: int = a;\n");
        assert_eq!(second.chunks[1].logprobs, Some(vec![-0.7, -1.2]));
    }

    #[test]
    fn max_bytes_truncates() {
        let mut g = TraceGenerator::new(spec(ONE));
        let plan = g.plan(&GenRequest::initial("p", GenParams { max_bytes: 5, ..GenParams::default() })).unwrap();
        assert_eq!(plan.bytes(), 5);
    }

    #[test]
    fn tokens() {
        assert_eq!(split_tokens("let ab_1: int = \"é\";\n"), vec![
            "let", " ", "ab_1", ":", " ", "int", " ", "=", " ", "\"", "é", "\"", ";", "\n"
        ]);
    }

    #[test]
    fn attempt_round_trip() {
        let s = spec(ONE);
        let back: TraceSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<Attempt>("\"sometimes\"").is_err());
        assert_eq!(serde_json::from_str::<Attempt>("3").unwrap(), Attempt::Exact(3));
    }
}
