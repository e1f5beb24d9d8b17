//! Multi-rollout policy scoring rollout groups by expected cost per success.

use std::collections::HashMap;

use super::{candidates_before, improves, is_error, plain, spawn, target_of, Candidate, Policy, PolicyAction};
use super::{PolicyConfig, PolicyError, SpawnParams, PROMPT_INITIAL, PROMPT_REPAIR};
use crate::models::{cond_fail, is_top_level, norm_distance, Belief, CostModelParams, ErrorTarget};
use crate::proto::Offset;
use crate::tree::{NodeId, RolloutId, SearchState, TreeNode};

/// One rollout of a group as seen by the group model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMember {
    /// Normalized rollback distance.
    pub x: f64,
    /// Expected completion time, s.
    pub t: f64,
    /// Expected token cost.
    pub cost: f64,
}

impl GroupMember {
    pub fn of(c: Offset, a_c: Offset, e: Offset, params: &CostModelParams) -> Result<Self, PolicyError> {
        Ok(GroupMember { x: norm_distance(c, e)?, t: params.latency(c, e, a_c)?, cost: params.token_cost(c, e, a_c)? })
    }
}

fn sorted_x(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Probability that at least one member repairs the target.
pub fn group_success(xs: &[f64], belief: &Belief, q: f64) -> f64 {
    let xs = sorted_x(xs.iter().copied());
    let n = xs.len();
    let mut prev = 0.0;
    let mut p = 0.0;
    for (j, &x) in xs.iter().enumerate() {
        let reach = belief.reach(x);
        p += (reach - prev) * (1.0 - (1.0 - q).powi((n - j) as i32));
        prev = reach;
    }
    p
}

/// Expected tokens burned before the first member succeeds or all finish.
pub fn group_cost(members: &[GroupMember], belief: &Belief, q: f64) -> f64 {
    let n = members.len();
    if n == 0 {
        return 0.0;
    }
    let xs = sorted_x(members.iter().map(|m| m.x));
    // Mass of root causes first reached at xs[j]; the rest is out of reach.
    let mut bands = Vec::with_capacity(n);
    let mut prev = 0.0;
    for &x in &xs {
        let r = belief.reach(x);
        bands.push((x, r - prev));
        prev = r;
    }
    let unreachable = (1.0 - prev).max(0.0);

    let mut order: Vec<&GroupMember> = members.iter().collect();
    order.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
    let mut rate: f64 = order.iter().map(|m| m.cost / m.t).sum();

    let mut total = 0.0;
    let mut t_prev = 0.0;
    for i in 0..n {
        let done = &order[..i];
        let survive: f64 = bands
            .iter()
            .map(|&(xj, mass)| mass * (1.0 - q).powi(done.iter().filter(|m| m.x >= xj).count() as i32))
            .sum::<f64>()
            + unreachable;
        total += (order[i].t - t_prev) * survive * rate;
        t_prev = order[i].t;
        rate -= order[i].cost / order[i].t;
    }
    total
}

/// C(G) / P(G); infinite when the group cannot succeed.
pub fn group_score(members: &[GroupMember], belief: &Belief, q: f64) -> f64 {
    let xs: Vec<f64> = members.iter().map(|m| m.x).collect();
    let p = group_success(&xs, belief, q);
    if p <= 0.0 {
        return f64::INFINITY;
    }
    group_cost(members, belief, q) / p
}

/// Greedily adds `n` starts from `pool` to `g0`. Returns indices into
/// `pool`, possibly repeated. When no addition can succeed the smallest
/// offset in the pool is used.
pub fn tokpolk_select(
    pool: &[(Offset, GroupMember)],
    g0: &[GroupMember],
    n: usize,
    belief: &Belief,
    q: f64,
) -> Result<Vec<usize>, PolicyError> {
    if pool.is_empty() {
        return Err(PolicyError::NoCandidates);
    }
    let fallback = (0..pool.len()).min_by_key(|&i| pool[i].0).unwrap();
    let mut group = g0.to_vec();
    let mut picks = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(f64, Offset)> = None;
        let mut pick = fallback;
        for (i, (off, m)) in pool.iter().enumerate() {
            group.push(*m);
            let s = group_score(&group, belief, q);
            group.pop();
            if s.is_finite() && improves(s, *off, best) {
                best = Some((s, *off));
                pick = i;
            }
        }
        group.push(pool[pick].1);
        picks.push(pick);
    }
    Ok(picks)
}

#[derive(Debug, Clone)]
struct Group {
    target: ErrorTarget,
    pi: Belief,
    members: Vec<RolloutId>,
}

pub struct TokPolK {
    cfg: PolicyConfig,
    params: CostModelParams,
    prior: Belief,
    groups: Vec<Group>,
    group_of: HashMap<RolloutId, usize>,
    progress: HashMap<RolloutId, Offset>,
}

impl TokPolK {
    pub fn new(cfg: PolicyConfig, params: CostModelParams, prior: Belief) -> Self {
        TokPolK { cfg, params, prior, groups: Vec::new(), group_of: HashMap::new(), progress: HashMap::new() }
    }

    pub fn group_belief(&self, rollout: RolloutId) -> Option<&Belief> {
        self.group_of.get(&rollout).map(|&g| &self.groups[g].pi)
    }

    fn pool(&self, cands: &[Candidate], e: Offset) -> Result<Vec<(Offset, GroupMember)>, PolicyError> {
        cands.iter().map(|c| Ok((c.offset, GroupMember::of(c.offset, c.a_c, e, &self.params)?))).collect()
    }

    fn select(
        &self,
        node: &TreeNode,
        state: &SearchState,
        g0: &[GroupMember],
        n: usize,
        e: Offset,
        pi: &Belief,
    ) -> Vec<NodeId> {
        let cands = candidates_before(state.tree, node.id, e);
        let picked = self.pool(&cands, e).and_then(|pool| tokpolk_select(&pool, g0, n, pi, self.cfg.q));
        match picked {
            Ok(ix) => ix.into_iter().map(|i| cands[i].node).collect(),
            Err(err) => {
                if !cands.is_empty() {
                    log::warn!("tokpolk selection failed ({err}); restarting from root");
                }
                vec![state.tree.root(); n]
            }
        }
    }

    fn start_new_group(&mut self, node: &TreeNode, state: &SearchState) -> Vec<PolicyAction> {
        let e = node.offset;
        let limit = self.cfg.alpha * e as f64;
        let victims: Vec<RolloutId> = state
            .active()
            .into_iter()
            .filter(|r| (self.progress_of(*r, state) as f64) < limit)
            .collect();
        let g = self.groups.len();
        self.groups.push(Group { target: target_of(node), pi: self.prior.clone(), members: Vec::new() });
        let starts = self.select(node, state, &[], victims.len() + 1, e, &self.prior);
        log::debug!("tokpolk: new group at {e}, preempting {} rollouts", victims.len());
        let mut out: Vec<PolicyAction> = victims.into_iter().map(|r| PolicyAction::Kill { rollout: r }).collect();
        out.extend(starts.into_iter().map(|s| spawn(s, PROMPT_REPAIR, plain(), Some(g as u64))));
        out
    }

    fn replace_in_group(&mut self, node: &TreeNode, state: &SearchState, g: usize) -> Vec<PolicyAction> {
        let e = self.groups[g].target.offset;
        if let Some(r) = node.rollout.and_then(|r| state.tree.rollout(r)) {
            if r.start_offset < e {
                let pi = cond_fail(&self.groups[g].pi, r.start_offset, e, self.cfg.q).expect("start before target");
                self.groups[g].pi = pi;
            }
        }
        let g0: Vec<GroupMember> = self.groups[g]
            .members
            .iter()
            .filter_map(|r| state.tree.rollout(*r))
            .filter(|r| r.is_active() && r.start_offset < e)
            .filter_map(|r| GroupMember::of(r.start_offset, state.tree.checkpoint_base(r.start), e, &self.params).ok())
            .collect();
        let pi = self.groups[g].pi.clone();
        let starts = self.select(node, state, &g0, 1, e, &pi);
        starts.into_iter().map(|s| spawn(s, PROMPT_REPAIR, plain(), Some(g as u64))).collect()
    }

    fn progress_of(&self, r: RolloutId, state: &SearchState) -> Offset {
        self.progress
            .get(&r)
            .copied()
            .or_else(|| state.tree.rollout(r).map(|x| x.start_offset))
            .unwrap_or(0)
    }
}

impl Policy for TokPolK {
    fn name(&self) -> &'static str {
        "tokpolk"
    }

    fn start(&mut self, state: &SearchState) -> Vec<PolicyAction> {
        let params = SpawnParams { temperature_delta: self.cfg.temperature_boost, ..plain() };
        (0..self.cfg.k).map(|_| spawn(state.tree.root(), PROMPT_INITIAL, params.clone(), None)).collect()
    }

    fn on_node(&mut self, node: &TreeNode, state: &SearchState) -> Vec<PolicyAction> {
        if !is_error(node) {
            if let Some(r) = node.rollout {
                self.progress.insert(r, node.offset);
            }
            return Vec::new();
        }
        let group = node.rollout.and_then(|r| self.group_of.get(&r).copied());
        match group {
            Some(g) if !is_top_level(&target_of(node), Some(&self.groups[g].target), self.cfg.theta, self.cfg.use_cat) => {
                self.replace_in_group(node, state, g)
            }
            _ => self.start_new_group(node, state),
        }
    }

    fn on_spawned(&mut self, group: Option<u64>, rollout: RolloutId) {
        if let Some(g) = group {
            let g = g as usize;
            if g < self.groups.len() {
                self.groups[g].members.push(rollout);
                self.group_of.insert(rollout, g);
            }
        }
    }
}
