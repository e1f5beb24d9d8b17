//! Discrete-event driver on a virtual nanosecond clock.
//!
//! Generator chunks are scheduled from the trace plan. The checker is a
//! fluid server per session: it starts `D_C` after the session opens, works
//! at `S_C` bytes/s plus `L_S` per checkpoint, and cannot finish a submit
//! before its bytes arrive. Everything a submit produces is delivered when
//! that submit finishes.

use std::collections::BTreeMap;

use super::manager::{Driver, Input, Manager};
use super::{HarnessError, Outcome, RunReport, TaskSpec};
use crate::genkit::{GenChunk, GenRequest, TokenLogprobs, TraceGenerator};
use crate::models::CostModelParams;
use crate::proto::Msg;
use crate::tree::RolloutId;

const TICKS_PER_S: f64 = 1e9;

fn ticks(s: f64) -> u64 {
    (s * TICKS_PER_S).round() as u64
}

/// Ties at equal time go by rollout, then event kind, then issue order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    t: u64,
    rollout: u64,
    rank: u8,
    seq: u64,
}

enum Ev {
    Chunk(GenChunk),
    End,
    Checker(Msg),
}

const RANK_CHUNK: u8 = 0;
const RANK_END: u8 = 1;

fn rank(m: &Msg) -> u8 {
    match m {
        Msg::Progress { .. } => 2,
        Msg::Chkpt { .. } => 3,
        Msg::Error { .. } => 4,
        _ => 5,
    }
}

struct VirtDriver {
    now: u64,
    seq: u64,
    queue: BTreeMap<Key, Ev>,
    gen: TraceGenerator,
    busy: BTreeMap<RolloutId, f64>,
    params: CostModelParams,
}

impl VirtDriver {
    fn push(&mut self, t: f64, rid: RolloutId, rank: u8, ev: Ev) {
        self.seq += 1;
        let key = Key { t: ticks(t).max(self.now), rollout: rid.0, rank, seq: self.seq };
        self.queue.insert(key, ev);
    }
}

impl Driver for VirtDriver {
    fn now(&self) -> f64 {
        self.now as f64 / TICKS_PER_S
    }

    fn start_stream(&mut self, rid: RolloutId, req: GenRequest) -> Result<(), HarnessError> {
        let plan = self.gen.plan(&req)?;
        let t0 = self.now();
        for c in plan.chunks {
            let chunk = GenChunk {
                logprobs: c.logprobs.map(|top| vec![TokenLogprobs { at: 0, top }]),
                bytes: c.bytes,
                at: c.at,
            };
            self.push(t0 + c.at, rid, RANK_CHUNK, Ev::Chunk(chunk));
        }
        self.push(t0 + plan.end_at, rid, RANK_END, Ev::End);
        Ok(())
    }

    fn cancel_stream(&mut self, rid: RolloutId) {
        self.queue.retain(|k, _| !(k.rollout == rid.0 && k.rank <= RANK_END));
    }

    fn session_opened(&mut self, rid: RolloutId) {
        let t = self.now() + self.params.d_c;
        self.busy.insert(rid, t);
    }

    fn checked(&mut self, rid: RolloutId, n: usize, msgs: Vec<Msg>) {
        let snaps = msgs.iter().filter(|m| matches!(m, Msg::Chkpt { .. })).count();
        let now = self.now();
        let busy = self.busy.get(&rid).copied().unwrap_or(now);
        let work = n as f64 / self.params.s_c + snaps as f64 * self.params.l_s;
        let finish = now.max(busy + work);
        self.busy.insert(rid, finish);
        for m in msgs {
            let r = rank(&m);
            self.push(finish, rid, r, Ev::Checker(m));
        }
    }
}

pub(crate) fn run(spec: &TaskSpec) -> Result<RunReport, HarnessError> {
    let trace = spec.trace_spec().ok_or_else(|| HarnessError::Config("virtual clock needs a trace".into()))?;
    let mut m = Manager::new(spec)?;
    let mut d = VirtDriver {
        now: 0,
        seq: 0,
        queue: BTreeMap::new(),
        gen: TraceGenerator::new(trace.clone()),
        busy: BTreeMap::new(),
        params: spec.cost_model,
    };
    m.start(&mut d);
    let limit = ticks(spec.timeout_s);
    while !m.done() {
        let Some((k, ev)) = d.queue.pop_first() else {
            let t = d.now();
            m.stop(Outcome::Failed, t, &mut d);
            break;
        };
        if k.t > limit {
            d.now = limit;
            m.stop(Outcome::Timeout, spec.timeout_s, &mut d);
            break;
        }
        d.now = k.t;
        let rid = RolloutId(k.rollout);
        let input = match ev {
            Ev::Chunk(c) => Input::Chunk(rid, c),
            Ev::End => Input::End(rid),
            Ev::Checker(msg) => Input::Checker(rid, msg),
        };
        m.handle(input, &mut d);
    }
    if let Some(e) = m.take_fatal() {
        return Err(e);
    }
    Ok(m.report(spec))
}
