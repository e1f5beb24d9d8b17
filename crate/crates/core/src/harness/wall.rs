//! Wall-clock driver: one thread per generation stream, all events funneled
//! through a channel into the manager loop. Checker submits run inline.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::manager::{Driver, Input, Manager};
use super::{HarnessError, Outcome, RunReport, TaskSpec};
use crate::genkit::{GenChunk, GenError, GenRequest, HttpGenerator, TokenLogprobs, TraceGenerator};
use crate::proto::Msg;
use crate::tree::RolloutId;

enum WallEv {
    Chunk(GenChunk),
    End,
    Failed(String),
}

enum Source {
    Trace(TraceGenerator),
    Http(Arc<HttpGenerator>),
}

struct WallDriver {
    t0: Instant,
    tx: Sender<(RolloutId, WallEv)>,
    cancels: BTreeMap<RolloutId, Arc<AtomicBool>>,
    source: Source,
    local: VecDeque<(RolloutId, Msg)>,
}

impl Driver for WallDriver {
    fn now(&self) -> f64 {
        self.t0.elapsed().as_secs_f64()
    }

    fn start_stream(&mut self, rid: RolloutId, req: GenRequest) -> Result<(), HarnessError> {
        let cancel = Arc::new(AtomicBool::new(false));
        self.cancels.insert(rid, cancel.clone());
        let tx = self.tx.clone();
        match &mut self.source {
            Source::Trace(gen) => {
                let plan = gen.plan(&req)?;
                let start = Instant::now();
                std::thread::spawn(move || {
                    for c in plan.chunks {
                        sleep_until(start + Duration::from_secs_f64(c.at));
                        if cancel.load(Ordering::SeqCst) {
                            return;
                        }
                        let chunk = GenChunk {
                            logprobs: c.logprobs.map(|top| vec![TokenLogprobs { at: 0, top }]),
                            bytes: c.bytes,
                            at: c.at,
                        };
                        if tx.send((rid, WallEv::Chunk(chunk))).is_err() {
                            return;
                        }
                    }
                    sleep_until(start + Duration::from_secs_f64(plan.end_at));
                    if !cancel.load(Ordering::SeqCst) {
                        let _ = tx.send((rid, WallEv::End));
                    }
                });
            }
            Source::Http(g) => {
                let g = Arc::clone(g);
                std::thread::spawn(move || {
                    let res = g.stream(&req, &cancel, &mut |c| {
                        let _ = tx.send((rid, WallEv::Chunk(c)));
                    });
                    let ev = match res {
                        Ok(_) => WallEv::End,
                        Err(GenError::Cancelled) => return,
                        Err(e) => WallEv::Failed(e.to_string()),
                    };
                    let _ = tx.send((rid, ev));
                });
            }
        }
        Ok(())
    }

    fn cancel_stream(&mut self, rid: RolloutId) {
        if let Some(c) = self.cancels.get(&rid) {
            c.store(true, Ordering::SeqCst);
        }
    }

    fn session_opened(&mut self, _rid: RolloutId) {}

    fn checked(&mut self, rid: RolloutId, _n: usize, msgs: Vec<Msg>) {
        self.local.extend(msgs.into_iter().map(|m| (rid, m)));
    }
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        std::thread::sleep(t - now);
    }
}

pub(crate) fn run(spec: &TaskSpec) -> Result<RunReport, HarnessError> {
    let source = match (spec.trace_spec(), &spec.generator.http) {
        (Some(t), _) => Source::Trace(TraceGenerator::new(t.clone())),
        (None, Some(h)) => Source::Http(Arc::new(HttpGenerator::new(h.clone())?)),
        (None, None) => return Err(HarnessError::Config("no generator".into())),
    };
    let (tx, rx) = mpsc::channel();
    let mut m = Manager::new(spec)?;
    let mut d = WallDriver { t0: Instant::now(), tx, cancels: BTreeMap::new(), source, local: VecDeque::new() };
    let deadline = d.t0 + Duration::from_secs_f64(spec.timeout_s);
    m.start(&mut d);
    loop {
        while let Some((rid, msg)) = d.local.pop_front() {
            m.handle(Input::Checker(rid, msg), &mut d);
        }
        if m.done() {
            break;
        }
        if m.idle() {
            let t = d.now();
            m.stop(Outcome::Failed, t, &mut d);
            break;
        }
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok((rid, ev)) => {
                let input = match ev {
                    WallEv::Chunk(c) => Input::Chunk(rid, c),
                    WallEv::End => Input::End(rid),
                    WallEv::Failed(msg) => Input::Failed(rid, msg),
                };
                m.handle(input, &mut d);
            }
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                m.stop(Outcome::Timeout, spec.timeout_s, &mut d);
                break;
            }
        }
    }
    for c in d.cancels.values() {
        c.store(true, Ordering::SeqCst);
    }
    if let Some(e) = m.take_fatal() {
        return Err(e);
    }
    Ok(m.report(spec))
}
