//! The manager: owns the search tree, the policy and the checker sessions,
//! and reacts to generator and checker events. Timing belongs to the
//! driver, which decides when submitted bytes come back as checker events.

use std::collections::{BTreeMap, VecDeque};

use serde_json::json;

use super::{AttemptRecord, EventRecord, HarnessError, Outcome, RunReport, TaskSpec, TreeSummary};
use crate::genkit::{build_repair_request, GenChunk, GenError, GenParams, GenRequest};
use crate::minichecker::{batch_check, checkpoint_chan, CheckerHost};
use crate::models::CostModelParams;
use crate::policies::{make_policy, token_entropy, Policy, PolicyAction, SpawnAction};
use crate::proto::{Meta, Msg, Offset, SessionId};
use crate::tree::{Attach, NodeId, NodeKind, RolloutId, RolloutStatus, SearchState, SearchTree};

pub(crate) enum Input {
    Chunk(RolloutId, GenChunk),
    End(RolloutId),
    Failed(RolloutId, String),
    Checker(RolloutId, Msg),
}

pub(crate) trait Driver {
    fn now(&self) -> f64;
    fn start_stream(&mut self, rid: RolloutId, req: GenRequest) -> Result<(), HarnessError>;
    fn cancel_stream(&mut self, rid: RolloutId);
    /// A checker session was opened or resumed for `rid`.
    fn session_opened(&mut self, rid: RolloutId);
    /// Output of one submit of `n` bytes by `rid`'s session.
    fn checked(&mut self, rid: RolloutId, n: usize, msgs: Vec<Msg>);
}

#[derive(Debug, Clone)]
struct ErrCtx {
    off: Offset,
    cat: String,
    diag: String,
}

struct Rt {
    session: SessionId,
    trigger: Option<Offset>,
    base: Offset,
    /// (token start offset, entropy) for tokens with log-probabilities.
    entropies: Vec<(Offset, f64)>,
}

pub(crate) struct Manager {
    tree: SearchTree,
    policy: Box<dyn Policy>,
    host: CheckerHost,
    params: CostModelParams,
    base_prompt: String,
    gen: GenParams,
    max_concurrency: usize,
    pending: VecDeque<(SpawnAction, Option<ErrCtx>)>,
    rt: BTreeMap<RolloutId, Rt>,
    events: Vec<EventRecord>,
    bytes_generated: u64,
    created: u64,
    resumed: u64,
    outcome: Option<(Outcome, f64)>,
    winner: Option<NodeId>,
    fatal: Option<HarnessError>,
}

impl Manager {
    pub fn new(spec: &TaskSpec) -> Result<Self, HarnessError> {
        let prior = spec.prior_belief()?;
        let policy = make_policy(&spec.policy.name, &spec.policy.config, &spec.cost_model, &prior)?;
        Ok(Manager {
            tree: SearchTree::new(),
            policy,
            host: CheckerHost::new(spec.checkpoint_policy()),
            params: spec.cost_model,
            base_prompt: spec.base_prompt(),
            gen: GenParams {
                temperature: spec.generator.temperature,
                seed: spec.generator.seed,
                max_bytes: spec.generator.max_bytes,
                want_logprobs: false,
                top_k: spec.policy.config.top_k,
            },
            max_concurrency: spec.max_concurrency,
            pending: VecDeque::new(),
            rt: BTreeMap::new(),
            events: Vec::new(),
            bytes_generated: 0,
            created: 0,
            resumed: 0,
            outcome: None,
            winner: None,
            fatal: None,
        })
    }

    pub fn start(&mut self, d: &mut dyn Driver) {
        let acts = self.policy.start(&SearchState { tree: &self.tree, cur: RolloutId(u64::MAX) });
        self.execute(acts, None, d);
        if self.rt.is_empty() && self.outcome.is_none() {
            self.fatal.get_or_insert(HarnessError::Config("policy spawned no initial rollout".into()));
            self.outcome = Some((Outcome::Failed, d.now()));
        }
    }

    pub fn take_fatal(&mut self) -> Option<HarnessError> {
        self.fatal.take()
    }

    pub fn done(&self) -> bool {
        self.outcome.is_some()
    }

    /// No rollout is running or waiting for a slot.
    pub fn idle(&self) -> bool {
        self.pending.is_empty() && self.tree.active_rollouts().is_empty()
    }

    fn is_active(&self, rid: RolloutId) -> bool {
        self.tree.rollout(rid).is_some_and(|r| r.is_active())
    }

    fn log(&mut self, t: f64, rid: RolloutId, kind: &str, off: Option<Offset>, cat: Option<&str>, detail: Option<String>) {
        self.events.push(EventRecord {
            t,
            rollout: rid.0,
            kind: kind.to_string(),
            off,
            cat: cat.map(str::to_string),
            detail,
        });
    }

    pub fn handle(&mut self, input: Input, d: &mut dyn Driver) {
        if self.done() {
            // Late checkpoints still own checker state.
            if let Input::Checker(_, Msg::Chkpt { id, .. }) = input {
                self.host.destroy(id);
            }
            return;
        }
        match input {
            Input::Chunk(rid, chunk) => {
                if !self.is_active(rid) {
                    return;
                }
                let before = self.tree.rollout(rid).map_or(0, |r| r.generated_end());
                self.tree.append_generated(rid, chunk.bytes.as_bytes()).expect("known rollout");
                self.bytes_generated += chunk.bytes.len() as u64;
                if let (Some(lps), Some(rt)) = (&chunk.logprobs, self.rt.get_mut(&rid)) {
                    rt.entropies.extend(lps.iter().map(|t| (before + t.at as Offset, token_entropy(&t.top))));
                }
                self.submit(rid, chunk.bytes.as_bytes(), false, d);
            }
            Input::End(rid) => {
                if self.is_active(rid) {
                    let end = self.tree.rollout(rid).map(|r| r.generated_end());
                    self.log(d.now(), rid, "stream_end", end, None, None);
                    self.submit(rid, b"", true, d);
                }
            }
            Input::Failed(rid, msg) => {
                if self.is_active(rid) {
                    let end = self.tree.rollout(rid).map_or(0, |r| r.generated_end());
                    self.on_error(rid, end, "session_failure", &msg, Meta::new(), d);
                }
            }
            Input::Checker(rid, msg) => self.on_checker(rid, msg, d),
        }
    }

    fn on_checker(&mut self, rid: RolloutId, msg: Msg, d: &mut dyn Driver) {
        let active = self.is_active(rid);
        match msg {
            Msg::Chkpt { off, id, .. } => {
                if !active {
                    self.host.destroy(id);
                    return;
                }
                match self.tree.attach_checkpoint(rid, off, id) {
                    Attach::Attached(_) => {
                        self.created += 1;
                        self.log(d.now(), rid, "chkpt", Some(off), None, Some(format!("session {id}")));
                    }
                    Attach::Shared { release, .. } => {
                        self.host.destroy(release);
                    }
                    Attach::Orphan(s) => {
                        self.host.destroy(s);
                    }
                }
            }
            Msg::Progress { off, cat, meta } if active => {
                let mut meta = meta.unwrap_or_default();
                let r = self.tree.rollout(rid).expect("active rollout");
                // Replayed prefix: already in the tree.
                if off <= r.start_offset && cat != "eos" {
                    return;
                }
                let leaf_off = self.tree.node(r.leaf).offset;
                let max_ent = self.rt[&rid]
                    .entropies
                    .iter()
                    .filter(|(o, _)| *o >= leaf_off && *o < off)
                    .map(|(_, h)| *h)
                    .fold(None, |m: Option<f64>, h| Some(m.map_or(h, |m| m.max(h))));
                if let Some(h) = max_ent {
                    meta.insert("max_entropy".into(), json!(h));
                }
                match self.tree.apply_progress(rid, off, &cat, meta) {
                    Ok(node) => {
                        self.log(d.now(), rid, "progress", Some(off), Some(&cat), None);
                        if cat == "eos" {
                            self.accept(rid, node, d);
                        } else {
                            let acts = self.policy.on_node(self.tree.node(node), &SearchState { tree: &self.tree, cur: rid });
                            self.execute(acts, None, d);
                        }
                    }
                    Err(e) => log::warn!("dropping progress of {rid}: {e}"),
                }
            }
            Msg::Error { off, cat, diag, meta } if active => {
                self.on_error(rid, off, &cat, &diag, meta.unwrap_or_default(), d)
            }
            _ => {}
        }
    }

    fn on_error(&mut self, rid: RolloutId, off: Offset, cat: &str, diag: &str, meta: Meta, d: &mut dyn Driver) {
        let out = match self.tree.apply_error(rid, off, cat, diag, meta) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("dropping error of {rid}: {e}");
                return;
            }
        };
        let node = out.node.expect("error node");
        let e = self.tree.node(node).offset;
        self.log(d.now(), rid, "error", Some(e), Some(cat), Some(diag.to_string()));
        self.release(rid, d);
        for k in &out.killed {
            self.log(d.now(), *k, "killed", None, None, Some("base truncated".into()));
            self.release(*k, d);
        }
        for s in out.released {
            self.host.destroy(s);
        }
        let ctx = ErrCtx { off: e, cat: cat.to_string(), diag: diag.to_string() };
        let acts = self.policy.on_node(self.tree.node(node), &SearchState { tree: &self.tree, cur: rid });
        self.execute(acts, Some(ctx), d);
        self.drain_pending(d);
    }

    /// Stops generation and drops the active checker session of a rollout
    /// that is no longer active.
    fn release(&mut self, rid: RolloutId, d: &mut dyn Driver) {
        d.cancel_stream(rid);
        if let Some(rt) = self.rt.get(&rid) {
            self.host.destroy(rt.session);
        }
    }

    fn execute(&mut self, actions: Vec<PolicyAction>, ctx: Option<ErrCtx>, d: &mut dyn Driver) {
        for a in actions {
            if self.done() {
                return;
            }
            match a {
                PolicyAction::Spawn(s) => self.spawn(s, ctx.clone(), d),
                PolicyAction::Kill { rollout } => {
                    if self.tree.finish(rollout, RolloutStatus::Killed).unwrap_or(false) {
                        self.log(d.now(), rollout, "killed", None, None, Some("policy".into()));
                        self.release(rollout, d);
                    }
                }
                PolicyAction::Prune { node } => match self.tree.prune(node) {
                    Ok(sessions) => sessions.into_iter().for_each(|s| {
                        self.host.destroy(s);
                    }),
                    Err(e) => log::warn!("prune rejected: {e}"),
                },
                PolicyAction::PruneCheckpoint { node } => match self.tree.prune_checkpoint(node) {
                    Ok(Some(s)) => {
                        self.host.destroy(s);
                    }
                    Ok(None) => {}
                    Err(e) => log::warn!("checkpoint prune rejected: {e}"),
                },
            }
        }
    }

    fn drain_pending(&mut self, d: &mut dyn Driver) {
        while !self.done() && self.tree.active_rollouts().len() < self.max_concurrency {
            let Some((s, ctx)) = self.pending.pop_front() else { break };
            self.spawn(s, ctx, d);
        }
    }

    fn spawn(&mut self, a: SpawnAction, ctx: Option<ErrCtx>, d: &mut dyn Driver) {
        if self.tree.active_rollouts().len() >= self.max_concurrency {
            self.pending.push_back((a, ctx));
            return;
        }
        let rid = match self.tree.spawn_rollout(a.start) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("spawn skipped: {e}");
                return;
            }
        };
        self.policy.on_spawned(a.group, rid);
        let restart = self.tree.resolve_restart(a.start).expect("live restart point");
        let prefix = self.tree.prefix(a.start);
        let resumed = restart.checkpoint.and_then(|(_, snap)| match self.host.resume(snap, &checkpoint_chan(snap)) {
            Ok((id, _)) => Some(id),
            Err(e) => {
                log::warn!("resume failed, replaying from 0: {e}");
                None
            }
        });
        let (session, base, replay) = match resumed {
            Some(id) => {
                self.resumed += 1;
                (id, restart.base, restart.replay)
            }
            None => (self.host.open().0, 0, prefix.clone()),
        };
        self.tree.bind_session(rid, session).expect("fresh rollout");
        self.rt.insert(rid, Rt { session, trigger: ctx.as_ref().map(|c| c.off), base, entropies: Vec::new() });
        let start_off = prefix.len() as Offset;
        self.log(d.now(), rid, "spawn", Some(start_off), None, Some(format!("base {base}")));
        d.session_opened(rid);
        if !replay.is_empty() {
            self.submit(rid, &replay, false, d);
        }

        let params = GenParams {
            temperature: self.gen.temperature + a.params.temperature_delta,
            seed: self.gen.seed.wrapping_add(rid.0),
            want_logprobs: a.params.want_logprobs || self.policy.wants_logprobs(),
            top_k: if a.params.top_k > 0 { a.params.top_k } else { self.gen.top_k },
            ..self.gen.clone()
        };
        let req = build_repair_request(
            &self.base_prompt,
            &String::from_utf8_lossy(&prefix),
            ctx.as_ref().map(|c| (c.cat.as_str(), c.diag.as_str())),
            params,
        );
        match d.start_stream(rid, req) {
            Ok(()) => {}
            Err(HarnessError::Gen(GenError::Http(msg))) => {
                let end = start_off;
                self.on_error(rid, end, "session_failure", &msg, Meta::new(), d);
            }
            Err(e) => {
                log::error!("cannot start generation for {rid}: {e}");
                self.fatal = Some(e);
                self.outcome = Some((Outcome::Failed, d.now()));
            }
        }
    }

    fn submit(&mut self, rid: RolloutId, bytes: &[u8], eos: bool, d: &mut dyn Driver) {
        let session = self.rt[&rid].session;
        match self.host.submit(session, bytes, eos) {
            Ok(msgs) => d.checked(rid, bytes.len(), msgs),
            Err(e) => d.checked(
                rid,
                0,
                vec![Msg::Error {
                    off: self.tree.rollout(rid).map_or(0, |r| r.generated_end()),
                    cat: "session_failure".into(),
                    diag: e.to_string(),
                    meta: None,
                }],
            ),
        }
    }

    fn accept(&mut self, rid: RolloutId, node: NodeId, d: &mut dyn Driver) {
        let _ = self.tree.finish(rid, RolloutStatus::Succeeded);
        self.log(d.now(), rid, "accept", Some(self.tree.node(node).offset), None, None);
        self.release(rid, d);
        for other in self.tree.active_rollouts() {
            let _ = self.tree.finish(other, RolloutStatus::Killed);
            self.release(other, d);
        }
        self.pending.clear();
        self.winner = Some(node);
        self.outcome = Some((Outcome::Accepted, d.now()));
    }

    /// Ends the run without a winner.
    pub fn stop(&mut self, outcome: Outcome, t: f64, d: &mut dyn Driver) {
        if self.done() {
            return;
        }
        for r in self.tree.active_rollouts() {
            let _ = self.tree.finish(r, RolloutStatus::Killed);
            self.release(r, d);
        }
        self.pending.clear();
        self.outcome = Some((outcome, t));
    }

    pub fn report(self, spec: &TaskSpec) -> RunReport {
        let (outcome, latency_s) = self.outcome.unwrap_or((Outcome::Failed, 0.0));
        let tree = &self.tree;
        let (program, static_ok) = match self.winner {
            Some(n) => {
                let p = String::from_utf8_lossy(&tree.prefix(n)).into_owned();
                let ok = batch_check(&p).accepted();
                (p, Some(ok))
            }
            None => {
                let deepest = tree
                    .live_nodes()
                    .filter(|n| n.kind == NodeKind::Progress)
                    .max_by_key(|n| (n.offset, std::cmp::Reverse(n.id)))
                    .map(|n| n.id);
                (deepest.map(|n| String::from_utf8_lossy(&tree.prefix(n)).into_owned()).unwrap_or_default(), None)
            }
        };
        let attempts: Vec<AttemptRecord> = tree
            .rollouts()
            .iter()
            .map(|r| {
                let rt = self.rt.get(&r.id);
                AttemptRecord {
                    rollout: r.id.0,
                    c: r.start_offset,
                    e: rt.and_then(|x| x.trigger),
                    base: rt.map_or(0, |x| x.base),
                    end: r.generated_end(),
                    status: format!("{:?}", r.status).to_lowercase(),
                    error_at: r.error.map(|n| tree.node(n).offset),
                }
            })
            .collect();
        let repairs: Vec<bool> = attempts
            .iter()
            .filter_map(|a| match a.e {
                Some(e) if a.c < e => {
                    Some(self.params.l_c((e - a.base) as f64) <= self.params.l_g((e - a.c) as f64))
                }
                _ => None,
            })
            .collect();
        let realized_catch_up =
            (!repairs.is_empty()).then(|| repairs.iter().filter(|x| **x).count() as f64 / repairs.len() as f64);
        let live: Vec<_> = tree.live_nodes().collect();
        RunReport {
            task: spec.id.clone(),
            policy: self.policy.name().to_string(),
            seed: spec.policy.config.seed,
            outcome,
            latency_s,
            bytes_generated: self.bytes_generated,
            rollouts_spawned: tree.rollouts().len() as u64,
            checkpoints_created: self.created,
            checkpoints_resumed: self.resumed,
            program,
            static_ok,
            realized_catch_up,
            tree: TreeSummary {
                nodes: live.len(),
                progress_nodes: live.iter().filter(|n| n.kind == NodeKind::Progress).count(),
                error_nodes: live.iter().filter(|n| n.kind == NodeKind::Error).count(),
                live_checkpoints: tree.live_handles().count(),
                deepest_progress: tree.deepest_progress(),
            },
            attempts,
            events: self.events,
            error: self.fatal.map(|e| e.to_string()),
            tree_json: tree.to_json(),
        }
    }
}
