//! Streaming completions over HTTP (server-sent events, `data: {...}` lines
//! terminated by `data: [DONE]`).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{GenChunk, GenError, GenRequest, TokenLogprobs};

const RETRIES: u32 = 2;
const BACKOFF: Duration = Duration::from_millis(250);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_timeout() -> f64 {
    300.0
}

pub struct HttpGenerator {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
}

enum Failure {
    /// Nothing was delivered yet; safe to retry.
    Retryable(String),
    Fatal(GenError),
}

impl HttpGenerator {
    pub fn new(cfg: HttpConfig) -> Result<Self, GenError> {
        if cfg.endpoint.is_empty() {
            return Err(GenError::Http("no endpoint configured".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_s))
            .connect_timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| GenError::Http(e.to_string()))?;
        Ok(HttpGenerator { cfg, client })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    pub fn body(&self, req: &GenRequest) -> Value {
        let mut body = json!({
            "model": self.cfg.model,
            "prompt": req.materialize(),
            "stream": true,
            "temperature": req.params.temperature,
            "seed": req.params.seed,
            "max_tokens": req.params.max_bytes,
        });
        if req.params.want_logprobs {
            body["logprobs"] = json!(req.params.top_k);
        }
        body
    }

    /// Streams one completion into `on_chunk`. Returns the number of bytes
    /// delivered. Connection failures and non-2xx answers before the first
    /// chunk are retried; a failure mid-stream is returned as is. Setting
    /// `cancel` stops delivery before the next chunk and drops the
    /// connection.
    pub fn stream(
        &self,
        req: &GenRequest,
        cancel: &AtomicBool,
        on_chunk: &mut dyn FnMut(GenChunk),
    ) -> Result<u64, GenError> {
        let body = self.body(req);
        let t0 = Instant::now();
        let mut delay = BACKOFF;
        let mut tries = 0;
        loop {
            if cancel.load(Ordering::SeqCst) {
                return Err(GenError::Cancelled);
            }
            match self.attempt(&body, req, t0, cancel, on_chunk) {
                Ok(n) => return Ok(n),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) if tries < RETRIES => {
                    log::warn!("completion request failed ({msg}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    tries += 1;
                }
                Err(Failure::Retryable(msg)) => return Err(GenError::Http(msg)),
            }
        }
    }

    fn attempt(
        &self,
        body: &Value,
        req: &GenRequest,
        t0: Instant,
        cancel: &AtomicBool,
        on_chunk: &mut dyn FnMut(GenChunk),
    ) -> Result<u64, Failure> {
        let mut rb = self
            .client
            .post(&self.cfg.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        for (k, v) in &self.cfg.headers {
            rb = rb.header(k, v);
        }
        let resp = rb.send().map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Failure::Retryable(format!("status {status}")));
        }
        let mut delivered = 0u64;
        let fail = |msg: String, delivered: u64| {
            if delivered == 0 {
                Failure::Retryable(msg)
            } else {
                Failure::Fatal(GenError::Http(msg))
            }
        };
        let mut reader = BufReader::new(resp);
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| fail(e.to_string(), delivered))?;
            if cancel.load(Ordering::SeqCst) {
                return Err(Failure::Fatal(GenError::Cancelled));
            }
            if n == 0 {
                return Err(fail("stream ended without [DONE]".into(), delivered));
            }
            let Some(data) = line.trim_end().strip_prefix("data:") else {
                continue;
            };
            let data = data.trim_start();
            if data == "[DONE]" {
                return Ok(delivered);
            }
            let v: Value = serde_json::from_str(data).map_err(|e| fail(format!("malformed event: {e}"), delivered))?;
            let Some(chunk) = parse_event(&v, req.params.want_logprobs, t0.elapsed().as_secs_f64()) else {
                continue;
            };
            if delivered + chunk.bytes.len() as u64 > req.params.max_bytes {
                return Ok(delivered);
            }
            delivered += chunk.bytes.len() as u64;
            on_chunk(chunk);
        }
    }
}

/// Maps one streamed event to a chunk; `None` for events without text.
fn parse_event(v: &Value, want_logprobs: bool, at: f64) -> Option<GenChunk> {
    let choice = v.get("choices")?.get(0)?;
    let text = choice.get("text").and_then(Value::as_str)?;
    if text.is_empty() {
        return None;
    }
    let logprobs = want_logprobs.then(|| {
        let lp = choice.get("logprobs");
        let tokens: Vec<&str> = lp
            .and_then(|l| l.get("tokens"))
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default();
        let tops = lp.and_then(|l| l.get("top_logprobs")).and_then(Value::as_array);
        let mut at = 0;
        let mut out = Vec::new();
        for (i, top) in tops.into_iter().flatten().enumerate() {
            let mut vals: Vec<f64> = match top {
                Value::Object(m) => m.values().filter_map(Value::as_f64).collect(),
                Value::Array(a) => a.iter().filter_map(|x| x.get("logprob").and_then(Value::as_f64)).collect(),
                _ => Vec::new(),
            };
            vals.sort_by(|a, b| b.total_cmp(a));
            out.push(TokenLogprobs { at, top: vals });
            at += tokens.get(i).map_or(0, |t| t.len());
        }
        out
    });
    Some(GenChunk { bytes: text.to_string(), logprobs, at })
}
