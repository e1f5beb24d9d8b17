//! Baseline repair policies: uniform random rollback, and the two
//! candidate walks (positional and entropy-ranked).

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{is_error, plain, spawn, target_of, Policy, PolicyAction, PolicyConfig, SpawnParams};
use super::{PROMPT_INITIAL, PROMPT_REPAIR};
use crate::models::{is_top_level, ErrorTarget};
use crate::tree::{NodeId, RolloutId, SearchState, TreeNode};

/// Entropy of a top-k distribution, with the residual mass treated as one
/// extra outcome. `0 · ln 0` is taken as 0.
pub fn token_entropy(logprobs: &[f64]) -> f64 {
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    let ps: Vec<f64> = logprobs.iter().map(|l| l.exp()).collect();
    let tail = (1.0 - ps.iter().sum::<f64>()).max(0.0);
    ps.iter().map(|&p| term(p)).sum::<f64>() + term(tail)
}

/// `meta.max_entropy` of a node, or −∞ when absent.
pub fn max_entropy_of(node: &TreeNode) -> f64 {
    node.meta.get("max_entropy").and_then(|v| v.as_f64()).unwrap_or(f64::NEG_INFINITY)
}

pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(cfg: PolicyConfig) -> Self {
        RandomPolicy { rng: ChaCha8Rng::seed_from_u64(cfg.seed) }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &'static str {
        "random"
    }

    fn start(&mut self, state: &SearchState) -> Vec<PolicyAction> {
        vec![spawn(state.tree.root(), PROMPT_INITIAL, plain(), None)]
    }

    fn on_node(&mut self, node: &TreeNode, state: &SearchState) -> Vec<PolicyAction> {
        if !is_error(node) {
            return Vec::new();
        }
        let cands = state.tree.ancestor_progress_nodes(node.id);
        let start = *cands.choose(&mut self.rng).unwrap_or(&state.tree.root());
        vec![spawn(start, PROMPT_REPAIR, plain(), None)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkOrder {
    /// Most recent progress node first, then back toward the root.
    Statement,
    /// Most recent progress node first, then by decreasing max entropy.
    Entropy,
}

#[derive(Debug)]
struct Episode {
    target: ErrorTarget,
    candidates: Vec<NodeId>,
    idx: usize,
    tries: u32,
    tag: u64,
}

/// Walks a fixed candidate list, trying each up to `a` times; once the list
/// is exhausted every retry starts from the root.
pub struct WalkPolicy {
    order: WalkOrder,
    cfg: PolicyConfig,
    a: u32,
    episode: Option<Episode>,
    members: HashSet<RolloutId>,
    next_tag: u64,
}

impl WalkPolicy {
    pub fn new(order: WalkOrder, cfg: PolicyConfig) -> Self {
        let a = cfg.a.unwrap_or(match order {
            WalkOrder::Statement => 1,
            WalkOrder::Entropy => 2,
        });
        WalkPolicy { order, cfg, a, episode: None, members: HashSet::new(), next_tag: 0 }
    }

    /// Candidate order of the current episode.
    pub fn candidates(&self) -> Option<&[NodeId]> {
        self.episode.as_ref().map(|e| e.candidates.as_slice())
    }

    fn params(&self) -> SpawnParams {
        match self.order {
            WalkOrder::Statement => plain(),
            WalkOrder::Entropy => SpawnParams { want_logprobs: true, top_k: self.cfg.top_k, ..plain() },
        }
    }

    fn order_candidates(&self, mut c: Vec<NodeId>, state: &SearchState) -> Vec<NodeId> {
        let Some(latest) = c.pop() else {
            return vec![state.tree.root()];
        };
        match self.order {
            WalkOrder::Statement => c.reverse(),
            WalkOrder::Entropy => {
                let key = |n: &NodeId| {
                    let node = state.tree.node(*n);
                    (max_entropy_of(node), node.offset)
                };
                let missing = c.iter().filter(|n| max_entropy_of(state.tree.node(**n)) == f64::NEG_INFINITY).count();
                if missing > 1 {
                    log::debug!("{} candidates lack max_entropy and sort last", missing - 1);
                }
                c.sort_by(|a, b| {
                    let (ea, oa) = key(a);
                    let (eb, ob) = key(b);
                    eb.partial_cmp(&ea).unwrap_or(std::cmp::Ordering::Equal).then(ob.cmp(&oa))
                });
            }
        }
        let mut out = vec![latest];
        out.extend(c);
        out
    }
}

impl Policy for WalkPolicy {
    fn name(&self) -> &'static str {
        match self.order {
            WalkOrder::Statement => "statement",
            WalkOrder::Entropy => "entropy",
        }
    }

    fn start(&mut self, state: &SearchState) -> Vec<PolicyAction> {
        vec![spawn(state.tree.root(), PROMPT_INITIAL, self.params(), None)]
    }

    fn on_node(&mut self, node: &TreeNode, state: &SearchState) -> Vec<PolicyAction> {
        if !is_error(node) {
            return Vec::new();
        }
        let new = target_of(node);
        let ours = node.rollout.is_some_and(|r| self.members.contains(&r));
        let fresh = match &self.episode {
            Some(ep) if ours => is_top_level(&new, Some(&ep.target), self.cfg.theta, self.cfg.use_cat),
            _ => true,
        };
        if fresh {
            let candidates = self.order_candidates(state.tree.ancestor_progress_nodes(node.id), state);
            self.next_tag += 1;
            self.members.clear();
            self.episode = Some(Episode { target: new, candidates, idx: 0, tries: 1, tag: self.next_tag });
        } else {
            let a = self.a;
            let ep = self.episode.as_mut().unwrap();
            if ep.tries < a {
                ep.tries += 1;
            } else {
                ep.idx += 1;
                ep.tries = 1;
            }
        }
        let ep = self.episode.as_ref().unwrap();
        let start = ep.candidates.get(ep.idx).copied().unwrap_or(state.tree.root());
        vec![spawn(start, PROMPT_REPAIR, self.params(), Some(ep.tag))]
    }

    fn on_spawned(&mut self, group: Option<u64>, rollout: RolloutId) {
        if group.is_some() && group == self.episode.as_ref().map(|e| e.tag) {
            self.members.insert(rollout);
        }
    }

    fn wants_logprobs(&self) -> bool {
        self.order == WalkOrder::Entropy
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_with_tail() {
        let h = token_entropy(&[0.5f64.ln(), 0.3f64.ln()]);
        assert!((h - 1.0297).abs() < 1e-4, "{h}");
    }

    #[test]
    fn entropy_without_tail() {
        let h = token_entropy(&[0.5f64.ln(), 0.5f64.ln()]);
        assert!((h - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(token_entropy(&[0.0]), 0.0);
    }
}
