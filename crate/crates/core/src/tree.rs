//! Search tree over checker-validated prefixes, plus rollout bookkeeping.
//!
//! Nodes live in an arena and are never reused; removed nodes are marked
//! dead and detached from their parent. A node stores only the bytes it adds
//! to its parent's prefix, so full prefixes are rebuilt on demand.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::Serialize;
use serde_json::{json, Value};

use crate::proto::{Meta, Offset, SessionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct RolloutId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct HandleId(pub usize);

impl fmt::Display for RolloutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Root,
    Progress,
    Error,
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub offset: Offset,
    pub cat: String,
    pub diag: Option<String>,
    pub meta: Meta,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub checkpoint: Option<HandleId>,
    pub rollout: Option<RolloutId>,
    /// Bytes `[parent.offset, offset)` of the prefix.
    suffix: Vec<u8>,
    alive: bool,
}

impl TreeNode {
    pub fn is_alive(&self) -> bool {
        self.alive
    }

    pub fn is_eos(&self) -> bool {
        self.kind == NodeKind::Progress && self.cat == "eos"
    }

    /// Root or non-terminal progress node: a legal restart point.
    pub fn is_restart_point(&self) -> bool {
        self.kind == NodeKind::Root || (self.kind == NodeKind::Progress && !self.is_eos())
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointHandle {
    pub id: HandleId,
    pub session: SessionId,
    pub offset: Offset,
    pub prefix_hash: u64,
    pub refcount: u32,
    prefix: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutStatus {
    Active,
    Failed,
    Succeeded,
    Killed,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub id: RolloutId,
    pub start: NodeId,
    pub start_offset: Offset,
    /// Deepest progress node produced so far (the start node initially).
    pub leaf: NodeId,
    pub error: Option<NodeId>,
    pub session: Option<SessionId>,
    pub status: RolloutStatus,
    pub latest_progress: Offset,
    /// Generated bytes, starting at `start_offset`.
    generated: Vec<u8>,
}

impl Rollout {
    pub fn is_active(&self) -> bool {
        self.status == RolloutStatus::Active
    }

    pub fn generated(&self) -> &[u8] {
        &self.generated
    }

    /// Absolute offset one past the last generated byte.
    pub fn generated_end(&self) -> Offset {
        self.start_offset + self.generated.len() as Offset
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("unknown rollout {0}")]
    UnknownRollout(RolloutId),
    #[error("unknown or removed node {0:?}")]
    UnknownNode(NodeId),
    #[error("rollout {0} is not active")]
    NotActive(RolloutId),
    #[error("progress at {off} does not advance past leaf offset {leaf} of rollout {rollout}")]
    NonMonotone { rollout: RolloutId, leaf: Offset, off: Offset },
    #[error("offset {off} lies beyond the {have} bytes generated by rollout {rollout}")]
    BeyondGenerated { rollout: RolloutId, off: Offset, have: Offset },
    #[error("node {0:?} is on the path of an active rollout")]
    ActivePath(NodeId),
    #[error("node {0:?} is not a restart point")]
    NotRestartPoint(NodeId),
}

/// Result of applying an error event.
#[derive(Debug, Clone, Default)]
pub struct ErrorOutcome {
    pub node: Option<NodeId>,
    /// Progress nodes removed by truncation, including pruned subtrees.
    pub removed: Vec<NodeId>,
    /// Other rollouts whose paths ran through removed nodes; now killed.
    pub killed: Vec<RolloutId>,
    /// Checkpoint sessions whose last reference disappeared.
    pub released: Vec<SessionId>,
    /// The reported offset preceded the rollout's start node.
    pub clamped: bool,
}

/// Result of a `chkpt` event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attach {
    /// New handle created for this session.
    Attached(HandleId),
    /// An equal prefix is already checkpointed; the new session is redundant.
    Shared { handle: HandleId, release: SessionId },
    /// No live node at that offset; the session should be destroyed.
    Orphan(SessionId),
}

/// Where a checker for a restart at some node comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Restart {
    /// Checkpoint to resume, or `None` for a fresh session from offset 0.
    pub checkpoint: Option<(HandleId, SessionId)>,
    /// Offset the checker state corresponds to before replay.
    pub base: Offset,
    /// Bytes `[base, start.offset)` to resubmit.
    pub replay: Vec<u8>,
}

/// FNV-1a 64-bit digest of a prefix.
pub fn prefix_hash(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Debug, Clone)]
pub struct SearchTree {
    nodes: Vec<TreeNode>,
    handles: Vec<Option<CheckpointHandle>>,
    by_hash: HashMap<u64, Vec<HandleId>>,
    rollouts: Vec<Rollout>,
}

impl Default for SearchTree {
    fn default() -> Self {
        Self::new()
    }
}

impl SearchTree {
    pub fn new() -> Self {
        let root = TreeNode {
            id: NodeId(0),
            kind: NodeKind::Root,
            offset: 0,
            cat: "root".into(),
            diag: None,
            meta: Meta::new(),
            parent: None,
            children: Vec::new(),
            checkpoint: None,
            rollout: None,
            suffix: Vec::new(),
            alive: true,
        };
        SearchTree { nodes: vec![root], handles: Vec::new(), by_hash: HashMap::new(), rollouts: Vec::new() }
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.0]
    }

    pub fn get(&self, id: NodeId) -> Option<&TreeNode> {
        self.nodes.get(id.0).filter(|n| n.alive)
    }

    pub fn live_nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.alive)
    }

    pub fn handle(&self, id: HandleId) -> Option<&CheckpointHandle> {
        self.handles.get(id.0).and_then(Option::as_ref)
    }

    pub fn live_handles(&self) -> impl Iterator<Item = &CheckpointHandle> {
        self.handles.iter().flatten()
    }

    pub fn rollout(&self, id: RolloutId) -> Option<&Rollout> {
        self.rollouts.get(id.0 as usize)
    }

    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }

    pub fn active_rollouts(&self) -> Vec<RolloutId> {
        self.rollouts.iter().filter(|r| r.is_active()).map(|r| r.id).collect()
    }

    fn rollout_mut(&mut self, id: RolloutId) -> Result<&mut Rollout, TreeError> {
        self.rollouts.get_mut(id.0 as usize).ok_or(TreeError::UnknownRollout(id))
    }

    fn live(&self, id: NodeId) -> Result<&TreeNode, TreeError> {
        self.get(id).ok_or(TreeError::UnknownNode(id))
    }

    /// Materialized prefix `[0, offset)` of a node.
    pub fn prefix(&self, id: NodeId) -> Vec<u8> {
        let mut parts = Vec::new();
        let mut cur = Some(id);
        while let Some(n) = cur {
            let node = &self.nodes[n.0];
            parts.push(&node.suffix);
            cur = node.parent;
        }
        let mut out = Vec::with_capacity(self.nodes[id.0].offset as usize);
        for p in parts.into_iter().rev() {
            out.extend_from_slice(p);
        }
        out
    }

    /// Nodes from the root down to `id`, inclusive.
    pub fn path(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = Some(id);
        while let Some(n) = cur {
            out.push(n);
            cur = self.nodes[n.0].parent;
        }
        out.reverse();
        out
    }

    /// Restart points on the path to `id` (root included), ordered by offset.
    pub fn ancestor_progress_nodes(&self, id: NodeId) -> Vec<NodeId> {
        self.path(id).into_iter().filter(|n| self.nodes[n.0].is_restart_point()).collect()
    }

    fn is_ancestor(&self, anc: NodeId, mut id: NodeId) -> bool {
        loop {
            if id == anc {
                return true;
            }
            match self.nodes[id.0].parent {
                Some(p) => id = p,
                None => return false,
            }
        }
    }

    /// Registers a rollout starting at `start` (root or a progress node).
    pub fn spawn_rollout(&mut self, start: NodeId) -> Result<RolloutId, TreeError> {
        let node = self.live(start)?;
        if !node.is_restart_point() {
            return Err(TreeError::NotRestartPoint(start));
        }
        let id = RolloutId(self.rollouts.len() as u64);
        let start_offset = node.offset;
        self.rollouts.push(Rollout {
            id,
            start,
            start_offset,
            leaf: start,
            error: None,
            session: None,
            status: RolloutStatus::Active,
            latest_progress: start_offset,
            generated: Vec::new(),
        });
        Ok(id)
    }

    pub fn bind_session(&mut self, rollout: RolloutId, session: SessionId) -> Result<(), TreeError> {
        self.rollout_mut(rollout)?.session = Some(session);
        Ok(())
    }

    pub fn append_generated(&mut self, rollout: RolloutId, bytes: &[u8]) -> Result<(), TreeError> {
        self.rollout_mut(rollout)?.generated.extend_from_slice(bytes);
        Ok(())
    }

    /// Moves an active rollout to a terminal status. Returns false if it
    /// was already terminal.
    pub fn finish(&mut self, rollout: RolloutId, status: RolloutStatus) -> Result<bool, TreeError> {
        let r = self.rollout_mut(rollout)?;
        if r.status != RolloutStatus::Active {
            return Ok(false);
        }
        r.status = status;
        Ok(true)
    }

    fn new_node(
        &mut self,
        kind: NodeKind,
        parent: NodeId,
        offset: Offset,
        cat: &str,
        diag: Option<String>,
        meta: Meta,
        rollout: RolloutId,
        suffix: Vec<u8>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(TreeNode {
            id,
            kind,
            offset,
            cat: cat.to_string(),
            diag,
            meta,
            parent: Some(parent),
            children: Vec::new(),
            checkpoint: None,
            rollout: Some(rollout),
            suffix,
            alive: true,
        });
        self.nodes[parent.0].children.push(id);
        id
    }

    /// Appends a progress node to the rollout's path. An `eos` node may sit
    /// at its leaf's offset; every other node must advance past it.
    pub fn apply_progress(
        &mut self,
        rollout: RolloutId,
        off: Offset,
        cat: &str,
        meta: Meta,
    ) -> Result<NodeId, TreeError> {
        let r = self.rollout(rollout).ok_or(TreeError::UnknownRollout(rollout))?;
        if !r.is_active() {
            return Err(TreeError::NotActive(rollout));
        }
        let leaf = r.leaf;
        let leaf_off = self.nodes[leaf.0].offset;
        let advances = off > leaf_off || (cat == "eos" && off == leaf_off && !self.nodes[leaf.0].is_eos());
        if !advances {
            return Err(TreeError::NonMonotone { rollout, leaf: leaf_off, off });
        }
        if off > r.generated_end() {
            return Err(TreeError::BeyondGenerated { rollout, off, have: r.generated_end() });
        }
        let lo = (leaf_off - r.start_offset) as usize;
        let hi = (off - r.start_offset) as usize;
        let suffix = r.generated[lo..hi].to_vec();
        let id = self.new_node(NodeKind::Progress, leaf, off, cat, None, meta, rollout, suffix);
        let r = self.rollout_mut(rollout)?;
        r.leaf = id;
        r.latest_progress = off;
        Ok(id)
    }

    /// Applies an error: truncates the rollout's nodes at or past the error
    /// offset, attaches the error node, and marks the rollout failed.
    pub fn apply_error(
        &mut self,
        rollout: RolloutId,
        off: Offset,
        cat: &str,
        diag: &str,
        mut meta: Meta,
    ) -> Result<ErrorOutcome, TreeError> {
        let r = self.rollout(rollout).ok_or(TreeError::UnknownRollout(rollout))?;
        if !r.is_active() {
            return Err(TreeError::NotActive(rollout));
        }
        let (start, start_off, leaf) = (r.start, r.start_offset, r.leaf);
        let mut out = ErrorOutcome::default();
        let mut e = off;
        if off < start_off {
            log::warn!("error at {off} precedes start offset {start_off} of {rollout}; clamping");
            meta.insert("reported_off".into(), json!(off));
            e = start_off;
            out.clamped = true;
        }
        // The rollout's own segment, deepest first.
        let mut keep = leaf;
        let mut doomed = Vec::new();
        while keep != start && self.nodes[keep.0].offset >= e {
            doomed.push(keep);
            keep = self.nodes[keep.0].parent.expect("segment below start");
        }
        if let Some(&top) = doomed.last() {
            self.remove_subtree(top, Some(rollout), &mut out);
        }
        let r = &self.rollouts[rollout.0 as usize];
        let lo = (self.nodes[keep.0].offset - start_off) as usize;
        let hi = ((e - start_off) as usize).min(r.generated.len()).max(lo);
        let suffix = r.generated[lo..hi].to_vec();
        let node = self.new_node(NodeKind::Error, keep, e, cat, Some(diag.to_string()), meta, rollout, suffix);
        let keep_off = self.nodes[keep.0].offset;
        let r = self.rollout_mut(rollout)?;
        r.leaf = keep;
        r.error = Some(node);
        r.status = RolloutStatus::Failed;
        r.latest_progress = keep_off;
        out.node = Some(node);
        Ok(out)
    }

    fn remove_subtree(&mut self, top: NodeId, owner: Option<RolloutId>, out: &mut ErrorOutcome) {
        if let Some(p) = self.nodes[top.0].parent {
            self.nodes[p.0].children.retain(|c| *c != top);
        }
        let mut stack = vec![top];
        let mut removed = Vec::new();
        while let Some(n) = stack.pop() {
            let node = &mut self.nodes[n.0];
            node.alive = false;
            stack.extend(node.children.iter().copied());
            if let Some(h) = node.checkpoint.take() {
                if let Some(session) = self.release_ref(h) {
                    out.released.push(session);
                }
            }
            removed.push(n);
        }
        // Rollouts whose path ran through the removed subtree lose their base.
        for r in &mut self.rollouts {
            if Some(r.id) == owner || !r.is_active() {
                continue;
            }
            if !self.nodes[r.start.0].alive {
                r.status = RolloutStatus::Killed;
                out.killed.push(r.id);
            }
        }
        out.removed.extend(removed.into_iter().filter(|n| self.nodes[n.0].kind == NodeKind::Progress));
    }

    fn release_ref(&mut self, h: HandleId) -> Option<SessionId> {
        let handle = self.handles[h.0].as_mut().expect("live handle");
        handle.refcount -= 1;
        if handle.refcount > 0 {
            return None;
        }
        let handle = self.handles[h.0].take().expect("live handle");
        if let Some(v) = self.by_hash.get_mut(&handle.prefix_hash) {
            v.retain(|x| *x != h);
            if v.is_empty() {
                self.by_hash.remove(&handle.prefix_hash);
            }
        }
        Some(handle.session)
    }

    /// Attaches a checkpoint announced by the rollout's checker session.
    pub fn attach_checkpoint(&mut self, rollout: RolloutId, off: Offset, session: SessionId) -> Attach {
        let Some(r) = self.rollout(rollout) else {
            return Attach::Orphan(session);
        };
        // Search the rollout's path, which also covers offsets replayed
        // below its start node.
        let mut cur = Some(r.leaf);
        let mut target = None;
        while let Some(n) = cur {
            let node = &self.nodes[n.0];
            if node.offset < off {
                break;
            }
            if node.offset == off && node.kind == NodeKind::Progress && !node.is_eos() && node.alive {
                target = Some(n);
                break;
            }
            cur = node.parent;
        }
        let Some(target) = target else {
            return Attach::Orphan(session);
        };
        if let Some(h) = self.nodes[target.0].checkpoint {
            return Attach::Shared { handle: h, release: session };
        }
        let prefix = self.prefix(target);
        let hash = prefix_hash(&prefix);
        let existing = self
            .by_hash
            .get(&hash)
            .and_then(|v| v.iter().copied().find(|h| self.handles[h.0].as_ref().is_some_and(|x| x.prefix == prefix)));
        if let Some(h) = existing {
            self.handles[h.0].as_mut().unwrap().refcount += 1;
            self.nodes[target.0].checkpoint = Some(h);
            return Attach::Shared { handle: h, release: session };
        }
        let h = HandleId(self.handles.len());
        self.handles.push(Some(CheckpointHandle { id: h, session, offset: off, prefix_hash: hash, refcount: 1, prefix }));
        self.by_hash.entry(hash).or_default().push(h);
        self.nodes[target.0].checkpoint = Some(h);
        Attach::Attached(h)
    }

    /// Nearest checkpointed ancestor-or-self of `start` and the bytes to
    /// replay from it.
    pub fn resolve_restart(&self, start: NodeId) -> Result<Restart, TreeError> {
        let node = self.live(start)?;
        if !node.is_restart_point() {
            return Err(TreeError::NotRestartPoint(start));
        }
        let prefix = self.prefix(start);
        let mut cur = Some(start);
        while let Some(n) = cur {
            if let Some(h) = self.nodes[n.0].checkpoint {
                let handle = self.handles[h.0].as_ref().expect("live handle");
                return Ok(Restart {
                    checkpoint: Some((h, handle.session)),
                    base: handle.offset,
                    replay: prefix[handle.offset as usize..].to_vec(),
                });
            }
            cur = self.nodes[n.0].parent;
        }
        Ok(Restart { checkpoint: None, base: 0, replay: prefix })
    }

    /// Offset of the nearest checkpointed ancestor-or-self, 0 when none.
    pub fn checkpoint_base(&self, id: NodeId) -> Offset {
        let mut cur = Some(id);
        while let Some(n) = cur {
            let node = &self.nodes[n.0];
            if let Some(h) = node.checkpoint.and_then(|h| self.handle(h)) {
                return h.offset;
            }
            cur = node.parent;
        }
        0
    }

    /// Removes the subtree at `target`. Rejected when it holds part of an
    /// active rollout's path.
    pub fn prune(&mut self, target: NodeId) -> Result<Vec<SessionId>, TreeError> {
        self.live(target)?;
        if target == self.root() {
            return Err(TreeError::ActivePath(target));
        }
        for r in self.rollouts.iter().filter(|r| r.is_active()) {
            if self.is_ancestor(target, r.leaf) {
                return Err(TreeError::ActivePath(target));
            }
        }
        let mut out = ErrorOutcome::default();
        self.remove_subtree(target, None, &mut out);
        Ok(out.released)
    }

    /// Drops the checkpoint attached to `node`, keeping the node.
    pub fn prune_checkpoint(&mut self, node: NodeId) -> Result<Option<SessionId>, TreeError> {
        self.live(node)?;
        Ok(self.nodes[node.0].checkpoint.take().and_then(|h| self.release_ref(h)))
    }

    /// Deepest accepted offset over all live progress nodes.
    pub fn deepest_progress(&self) -> Offset {
        self.live_nodes().filter(|n| n.kind == NodeKind::Progress).map(|n| n.offset).max().unwrap_or(0)
    }

    /// Checks structural invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut refs: HashMap<usize, u32> = HashMap::new();
        for n in self.live_nodes() {
            if let Some(p) = n.parent {
                let parent = &self.nodes[p.0];
                if !parent.alive {
                    return Err(format!("{:?} has a removed parent", n.id));
                }
                if !parent.children.contains(&n.id) {
                    return Err(format!("{:?} missing from its parent's children", n.id));
                }
                let ok = match n.kind {
                    NodeKind::Progress if n.is_eos() => n.offset >= parent.offset,
                    NodeKind::Progress => n.offset > parent.offset,
                    _ => n.offset >= parent.offset,
                };
                if !ok {
                    return Err(format!("{:?} offset {} not past parent {}", n.id, n.offset, parent.offset));
                }
                if n.suffix.len() as Offset != n.offset - parent.offset {
                    return Err(format!("{:?} suffix length mismatch", n.id));
                }
                if parent.kind == NodeKind::Error || parent.is_eos() {
                    return Err(format!("{:?} hangs below a terminal node", n.id));
                }
            }
            if let Some(h) = n.checkpoint {
                let Some(handle) = self.handle(h) else {
                    return Err(format!("{:?} references a destroyed handle", n.id));
                };
                if handle.prefix != self.prefix(n.id) || handle.offset != n.offset {
                    return Err(format!("{:?} handle prefix differs from node prefix", n.id));
                }
                *refs.entry(h.0).or_default() += 1;
            }
        }
        for h in self.live_handles() {
            let count = refs.get(&h.id.0).copied().unwrap_or(0);
            if count != h.refcount {
                return Err(format!("handle {:?} refcount {} but {} references", h.id, h.refcount, count));
            }
            if prefix_hash(&h.prefix) != h.prefix_hash {
                return Err(format!("handle {:?} hash mismatch", h.id));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for h in self.live_handles() {
            if !seen.insert(&h.prefix) {
                return Err("two live handles share one prefix".into());
            }
        }
        Ok(())
    }

    /// JSON rendering for debugging and docs.
    pub fn to_json(&self) -> Value {
        let nodes: Vec<Value> = self
            .live_nodes()
            .map(|n| {
                json!({
                    "id": n.id,
                    "kind": n.kind,
                    "offset": n.offset,
                    "cat": n.cat,
                    "diag": n.diag,
                    "parent": n.parent,
                    "children": n.children,
                    "rollout": n.rollout,
                    "checkpoint": n.checkpoint.and_then(|h| self.handle(h)).map(|h| json!({
                        "session": h.session, "offset": h.offset, "refcount": h.refcount
                    })),
                    "meta": n.meta,
                })
            })
            .collect();
        let rollouts: Vec<Value> = self
            .rollouts
            .iter()
            .map(|r| {
                json!({
                    "id": r.id,
                    "start": r.start,
                    "start_offset": r.start_offset,
                    "leaf": r.leaf,
                    "error": r.error,
                    "status": r.status,
                    "latest_progress": r.latest_progress,
                    "generated_bytes": r.generated.len(),
                })
            })
            .collect();
        json!({ "nodes": nodes, "rollouts": rollouts })
    }
}

/// Read-only view handed to policies.
#[derive(Debug, Clone, Copy)]
pub struct SearchState<'a> {
    pub tree: &'a SearchTree,
    pub cur: RolloutId,
}

impl<'a> SearchState<'a> {
    pub fn active(&self) -> Vec<RolloutId> {
        self.tree.active_rollouts()
    }
}
