//! Repair policies: the manager reports every new tree node and executes
//! the spawn/kill/prune actions a policy returns.

mod baselines;
mod tokpol;
mod tokpolk;

pub use baselines::{max_entropy_of, token_entropy, RandomPolicy, WalkOrder, WalkPolicy};
pub use tokpol::{tokpol_select, TokPol};
pub use tokpolk::{group_cost, group_score, group_success, tokpolk_select, GroupMember, TokPolK};

use serde::{Deserialize, Serialize};

use crate::models::{Belief, CostModelParams, ErrorTarget, ModelError};
use crate::proto::Offset;
use crate::tree::{NodeId, NodeKind, RolloutId, SearchState, SearchTree, TreeNode};

pub const PROMPT_INITIAL: &str = "initial";
pub const PROMPT_REPAIR: &str = "repair";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpawnParams {
    /// Added to the generator's base temperature.
    pub temperature_delta: f64,
    pub want_logprobs: bool,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpawnAction {
    pub start: NodeId,
    pub prompt: String,
    pub params: SpawnParams,
    /// Episode or group the new rollout joins, echoed back via
    /// [`Policy::on_spawned`].
    pub group: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PolicyAction {
    Spawn(SpawnAction),
    Kill { rollout: RolloutId },
    Prune { node: NodeId },
    PruneCheckpoint { node: NodeId },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("no rollback candidates")]
    NoCandidates,
    #[error("unknown policy {0:?}")]
    UnknownPolicy(String),
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub q: f64,
    pub theta: u64,
    pub use_cat: bool,
    pub k: usize,
    pub alpha: f64,
    /// Attempts per candidate for the walk baselines; `None` picks the
    /// per-policy default (1 for statement, 2 for entropy).
    pub a: Option<u32>,
    pub top_k: usize,
    pub temperature_boost: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            q: 0.5,
            theta: 64,
            use_cat: true,
            k: 2,
            alpha: 0.5,
            a: None,
            top_k: 128,
            temperature_boost: 0.2,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.to_string()));
        if !(self.q > 0.0 && self.q <= 1.0) {
            return bad("q must lie in (0, 1]");
        }
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.a == Some(0) {
            return bad("a must be at least 1");
        }
        Ok(())
    }
}

pub trait Policy: Send {
    fn name(&self) -> &'static str;

    /// Actions at task start, before any node exists besides the root.
    fn start(&mut self, state: &SearchState) -> Vec<PolicyAction>;

    /// Called once for every new progress or error node.
    fn on_node(&mut self, node: &TreeNode, state: &SearchState) -> Vec<PolicyAction>;

    /// The manager created `rollout` for a spawn tagged `group`.
    fn on_spawned(&mut self, _group: Option<u64>, _rollout: RolloutId) {}

    /// Whether generated tokens need log-probabilities.
    fn wants_logprobs(&self) -> bool {
        false
    }
}

pub const POLICY_NAMES: [&str; 5] = ["tokpol", "tokpolk", "random", "statement", "entropy"];

pub fn make_policy(
    name: &str,
    cfg: &PolicyConfig,
    params: &CostModelParams,
    prior: &Belief,
) -> Result<Box<dyn Policy>, PolicyError> {
    cfg.validate()?;
    Ok(match name {
        "tokpol" => Box::new(TokPol::new(cfg.clone(), *params, prior.clone())),
        "tokpolk" => Box::new(TokPolK::new(cfg.clone(), *params, prior.clone())),
        "random" => Box::new(RandomPolicy::new(cfg.clone())),
        "statement" => Box::new(WalkPolicy::new(WalkOrder::Statement, cfg.clone())),
        "entropy" => Box::new(WalkPolicy::new(WalkOrder::Entropy, cfg.clone())),
        other => return Err(PolicyError::UnknownPolicy(other.to_string())),
    })
}

/// A rollback point with the offset of its nearest checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub node: NodeId,
    pub offset: Offset,
    pub a_c: Offset,
}

/// Ancestor restart points of `node` lying strictly before `e`.
pub fn candidates_before(tree: &SearchTree, node: NodeId, e: Offset) -> Vec<Candidate> {
    tree.ancestor_progress_nodes(node)
        .into_iter()
        .map(|n| Candidate { node: n, offset: tree.node(n).offset, a_c: tree.checkpoint_base(n) })
        .filter(|c| c.offset < e)
        .collect()
}

pub(crate) fn target_of(node: &TreeNode) -> ErrorTarget {
    ErrorTarget { offset: node.offset, category: node.cat.clone() }
}

pub(crate) fn is_error(node: &TreeNode) -> bool {
    node.kind == NodeKind::Error
}

pub(crate) fn spawn(start: NodeId, prompt: &str, params: SpawnParams, group: Option<u64>) -> PolicyAction {
    PolicyAction::Spawn(SpawnAction { start, prompt: prompt.to_string(), params, group })
}

pub(crate) fn plain() -> SpawnParams {
    SpawnParams { temperature_delta: 0.0, want_logprobs: false, top_k: 0 }
}

const TIE_REL: f64 = 1e-12;

/// Argmin update with ties going to the larger offset.
pub(crate) fn improves(score: f64, off: Offset, best: Option<(f64, Offset)>) -> bool {
    let Some((bs, boff)) = best else {
        return true;
    };
    if score.is_infinite() || bs.is_infinite() {
        return if score == bs { off > boff } else { score < bs };
    }
    let tol = TIE_REL * bs.abs().max(score.abs()).max(1.0);
    if (score - bs).abs() <= tol {
        off > boff
    } else {
        score < bs
    }
}
