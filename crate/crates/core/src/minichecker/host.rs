//! Session registry: active sessions plus dormant checkpoint snapshots.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::session::{ActiveSession, CheckerState, CheckpointPolicy, SessionEvent};
use crate::proto::{Msg, Offset, SessionId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HostError {
    #[error("unknown active session {0}")]
    UnknownSession(SessionId),
    #[error("unknown checkpoint {0}")]
    UnknownCheckpoint(SessionId),
    #[error("malformed channel address {0:?}")]
    BadChannel(String),
}

#[derive(Debug)]
struct Snapshot {
    off: Offset,
    parent: SessionId,
    state: Arc<CheckerState>,
}

#[derive(Debug, Default)]
struct Inner {
    next_id: u64,
    // `None` while a session is checked out by an in-flight submit.
    active: HashMap<SessionId, Option<ActiveSession>>,
    snapshots: HashMap<SessionId, Snapshot>,
}

impl Inner {
    fn alloc(&mut self) -> SessionId {
        self.next_id += 1;
        SessionId(self.next_id)
    }
}

/// Owns every session of one checker instance. Methods take `&self`; the
/// host can be shared across threads behind an `Arc`.
#[derive(Debug)]
pub struct CheckerHost {
    policy: CheckpointPolicy,
    max_snapshots: Option<usize>,
    inner: Mutex<Inner>,
}

/// Channel address naming a checkpoint, as carried by `resume.chan`.
pub fn checkpoint_chan(id: SessionId) -> String {
    format!("chkpt:{}", id.0)
}

/// Inverse of [`checkpoint_chan`].
pub fn parse_chan(chan: &str) -> Result<SessionId, HostError> {
    chan.strip_prefix("chkpt:")
        .and_then(|n| n.parse().ok())
        .map(SessionId)
        .ok_or_else(|| HostError::BadChannel(chan.to_string()))
}

impl CheckerHost {
    pub fn new(policy: CheckpointPolicy) -> Self {
        CheckerHost { policy, max_snapshots: None, inner: Mutex::new(Inner::default()) }
    }

    /// Caps live snapshots; further checkpoints are skipped with a warning.
    pub fn with_max_snapshots(mut self, limit: usize) -> Self {
        self.max_snapshots = Some(limit);
        self
    }

    pub fn policy(&self) -> CheckpointPolicy {
        self.policy
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Starts a fresh active session and returns its `init` message.
    pub fn open(&self) -> (SessionId, Msg) {
        let mut inner = self.lock();
        let id = inner.alloc();
        inner.active.insert(id, Some(ActiveSession::new(id, self.policy)));
        (id, Msg::Init { id, pid: None })
    }

    /// Starts an active session from checkpoint `snapshot`. The checkpoint
    /// stays available for further resumes.
    pub fn resume(&self, snapshot: SessionId, chan: &str) -> Result<(SessionId, Msg), HostError> {
        let mut inner = self.lock();
        let state = match inner.snapshots.get(&snapshot) {
            Some(s) => CheckerState::clone(&s.state),
            None => return Err(HostError::UnknownCheckpoint(snapshot)),
        };
        let id = inner.alloc();
        let session = ActiveSession::from_snapshot(id, snapshot, chan.to_string(), self.policy, state);
        inner.active.insert(id, Some(session));
        Ok((id, Msg::Init { id, pid: Some(snapshot) }))
    }

    /// Feeds `delta` to an active session and returns the resulting
    /// messages. Checkpoints are registered and announced as `chkpt`.
    pub fn submit(&self, id: SessionId, delta: &[u8], eos: bool) -> Result<Vec<Msg>, HostError> {
        let mut session = {
            let mut inner = self.lock();
            match inner.active.get_mut(&id).and_then(Option::take) {
                Some(s) => s,
                None => return Err(HostError::UnknownSession(id)),
            }
        };
        let events = session.submit(delta, eos);
        let mut inner = self.lock();
        let mut out = Vec::with_capacity(events.len());
        for ev in events {
            match ev {
                SessionEvent::Progress { off, cat } => out.push(Msg::progress(off, cat.as_str())),
                SessionEvent::Error(err) => out.push(err.to_msg()),
                SessionEvent::Checkpoint { off, state } => {
                    if self.max_snapshots.is_some_and(|m| inner.snapshots.len() >= m) {
                        log::warn!("snapshot limit reached, skipping checkpoint of {id} at {off}");
                        continue;
                    }
                    let cid = inner.alloc();
                    inner.snapshots.insert(cid, Snapshot { off, parent: id, state: Arc::from(state) });
                    out.push(Msg::Chkpt { off, id: cid, pid: id });
                }
            }
        }
        // The session may have been destroyed while checked out.
        if let Some(slot) = inner.active.get_mut(&id) {
            *slot = Some(session);
        }
        Ok(out)
    }

    /// Destroys an active session or a checkpoint. Returns whether it existed.
    pub fn destroy(&self, id: SessionId) -> bool {
        let mut inner = self.lock();
        inner.active.remove(&id).is_some() || inner.snapshots.remove(&id).is_some()
    }

    /// Offset and producing session of a live checkpoint.
    pub fn checkpoint_info(&self, id: SessionId) -> Option<(Offset, SessionId)> {
        self.lock().snapshots.get(&id).map(|s| (s.off, s.parent))
    }

    pub fn snapshot_state(&self, id: SessionId) -> Option<Arc<CheckerState>> {
        self.lock().snapshots.get(&id).map(|s| Arc::clone(&s.state))
    }

    pub fn live_sessions(&self) -> usize {
        self.lock().active.len()
    }

    pub fn live_snapshots(&self) -> usize {
        self.lock().snapshots.len()
    }
}
