//! Single-rollout token-minimizing policy.

use super::{candidates_before, improves, is_error, plain, spawn, target_of, Policy, PolicyAction, PolicyConfig, PolicyError};
use super::{PROMPT_INITIAL, PROMPT_REPAIR};
use crate::models::{cond_fail, is_top_level, p_success, Belief, CostModelParams, ErrorTarget};
use crate::proto::Offset;
use crate::tree::{NodeId, SearchState, TreeNode};

/// Picks the rollback point minimizing `cost + PFail · continuation`.
///
/// `offsets` must be strictly increasing and below `e`; `costs[i]` is the
/// token cost of an attempt from `offsets[i]`. Returns the chosen index and
/// its score. The continuation of a candidate is the cheapest earlier
/// fallback, evaluated under the posterior that the candidate itself failed.
pub fn tokpol_select(
    offsets: &[Offset],
    costs: &[f64],
    e: Offset,
    belief: &Belief,
    q: f64,
) -> Result<(usize, f64), PolicyError> {
    if offsets.is_empty() {
        return Err(PolicyError::NoCandidates);
    }
    assert_eq!(offsets.len(), costs.len());
    let pfail = |i: usize, b: &Belief| -> Result<f64, PolicyError> { Ok(1.0 - p_success(offsets[i], e, b, q)?) };

    let mut cont = vec![0.0; offsets.len()];
    for k in 0..offsets.len() {
        let earlier: Vec<usize> = (0..k).filter(|&j| offsets[j] < offsets[k]).collect();
        if earlier.is_empty() {
            continue;
        }
        let posterior = cond_fail(belief, offsets[k], e, q)?;
        let mut best = f64::INFINITY;
        for j in earlier {
            best = best.min(costs[j] + pfail(j, &posterior)? * cont[j]);
        }
        cont[k] = best;
    }

    let mut best: Option<(f64, Offset)> = None;
    let mut pick = 0;
    for k in 0..offsets.len() {
        let score = costs[k] + pfail(k, belief)? * cont[k];
        if improves(score, offsets[k], best) {
            best = Some((score, offsets[k]));
            pick = k;
        }
    }
    Ok((pick, best.map_or(0.0, |b| b.0)))
}

pub struct TokPol {
    cfg: PolicyConfig,
    params: CostModelParams,
    prior: Belief,
    pi: Belief,
    target: Option<ErrorTarget>,
}

impl TokPol {
    pub fn new(cfg: PolicyConfig, params: CostModelParams, prior: Belief) -> Self {
        TokPol { cfg, params, pi: prior.clone(), prior, target: None }
    }

    pub fn belief(&self) -> &Belief {
        &self.pi
    }

    pub fn target(&self) -> Option<&ErrorTarget> {
        self.target.as_ref()
    }

    fn choose(&self, node: &TreeNode, state: &SearchState) -> Result<NodeId, PolicyError> {
        let e = node.offset;
        let cands = candidates_before(state.tree, node.id, e);
        if cands.is_empty() {
            return Ok(state.tree.root());
        }
        let offsets: Vec<Offset> = cands.iter().map(|c| c.offset).collect();
        let costs = cands
            .iter()
            .map(|c| self.params.token_cost(c.offset, e, c.a_c))
            .collect::<Result<Vec<_>, _>>()?;
        let (i, score) = tokpol_select(&offsets, &costs, e, &self.pi, self.cfg.q)?;
        log::debug!("tokpol: error at {e}, rollback to {} (score {score:.1})", offsets[i]);
        Ok(cands[i].node)
    }
}

impl Policy for TokPol {
    fn name(&self) -> &'static str {
        "tokpol"
    }

    fn start(&mut self, state: &SearchState) -> Vec<PolicyAction> {
        vec![spawn(state.tree.root(), PROMPT_INITIAL, plain(), None)]
    }

    fn on_node(&mut self, node: &TreeNode, state: &SearchState) -> Vec<PolicyAction> {
        if !is_error(node) {
            return Vec::new();
        }
        let new = target_of(node);
        if is_top_level(&new, self.target.as_ref(), self.cfg.theta, self.cfg.use_cat) {
            self.target = Some(new);
            self.pi = self.prior.clone();
        } else if let (Some(t), Some(r)) = (&self.target, node.rollout.and_then(|r| state.tree.rollout(r))) {
            if r.start_offset < t.offset {
                self.pi = cond_fail(&self.pi, r.start_offset, t.offset, self.cfg.q).expect("start before target");
            }
        }
        let start = self.choose(node, state).unwrap_or_else(|err| {
            log::warn!("tokpol selection failed ({err}); restarting from root");
            state.tree.root()
        });
        vec![spawn(start, PROMPT_REPAIR, plain(), None)]
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use super::*;
    use crate::models::cond_fail_x;

    /// Top-down memoized evaluation of the same recursion.
    fn oracle(offsets: &[Offset], costs: &[f64], e: Offset, pi: &Belief, q: f64) -> (Offset, f64) {
        fn reach(b: &Belief, c: Offset, e: Offset) -> f64 {
            let x = (e - c) as f64 / e as f64;
            b.bins().iter().filter(|(d, _)| *d < x).map(|(_, m)| m).sum()
        }
        fn cont(
            k: usize,
            offsets: &[Offset],
            costs: &[f64],
            e: Offset,
            pi: &Belief,
            q: f64,
            memo: &mut HashMap<usize, f64>,
        ) -> f64 {
            if let Some(v) = memo.get(&k) {
                return *v;
            }
            let post = cond_fail_x(pi, (e - offsets[k]) as f64 / e as f64, q);
            let v = (0..k)
                .filter(|&j| offsets[j] < offsets[k])
                .map(|j| costs[j] + (1.0 - q * reach(&post, offsets[j], e)) * cont(j, offsets, costs, e, pi, q, memo))
                .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.min(s))))
                .unwrap_or(0.0);
            memo.insert(k, v);
            v
        }
        let mut memo = HashMap::new();
        let mut scored: Vec<(f64, Offset)> = (0..offsets.len())
            .map(|k| {
                let c = cont(k, offsets, costs, e, pi, q, &mut memo);
                (costs[k] + (1.0 - q * reach(pi, offsets[k], e)) * c, offsets[k])
            })
            .collect();
        // Lowest score first; among near-equal scores the larger offset.
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let low = scored[0].0;
        let tol = 1e-12 * low.abs().max(1.0);
        scored.iter().filter(|s| s.0 - low <= tol).map(|s| (s.1, s.0)).max_by_key(|s| s.0).unwrap()
    }

    fn example_belief() -> Belief {
        Belief::new(vec![(0.1, 0.4), (0.3, 0.3), (0.6, 0.2), (0.9, 0.1)]).unwrap()
    }

    #[test]
    fn worked_example_selects_80() {
        let offs = [0, 50, 80];
        let costs: Vec<f64> = offs.iter().map(|c| (100 - c) as f64).collect();
        let (i, score) = tokpol_select(&offs, &costs, 100, &example_belief(), 0.8).unwrap();
        assert_eq!(offs[i], 80);
        assert!((score - 88.0).abs() < 1e-9, "{score}");
        let (o, s) = oracle(&offs, &costs, 100, &example_belief(), 0.8);
        assert_eq!((o, (s * 1e6).round()), (80, 88e6));
    }

    #[test]
    fn single_candidate_is_selected() {
        let (i, _) = tokpol_select(&[40], &[60.0], 100, &example_belief(), 0.5).unwrap();
        assert_eq!(i, 0);
    }

    #[test]
    fn root_forced_when_only_it_is_eligible() {
        // All mass at d=0.95: only a full rollback (x=1) reaches it.
        let pi = Belief::new(vec![(0.5, 0.0), (0.95, 1.0)]).unwrap();
        let offs = [0, 30, 60, 90];
        let costs: Vec<f64> = offs.iter().map(|c| (100 - c) as f64).collect();
        let (i, _) = tokpol_select(&offs, &costs, 100, &pi, 1.0).unwrap();
        assert_eq!(offs[i], 0);
    }

    #[test]
    fn empty_candidates_is_an_error() {
        assert_eq!(tokpol_select(&[], &[], 100, &example_belief(), 0.5), Err(PolicyError::NoCandidates));
    }

    fn instance() -> impl Strategy<Value = (Vec<Offset>, Vec<f64>, Offset, Vec<f64>, f64)> {
        (1usize..=6, 50u64..2000, prop::collection::vec(0.0f64..1.0, 10), 0.05f64..=1.0).prop_flat_map(
            |(n, e, masses, q)| {
                (prop::collection::btree_set(1..e, n - 1), prop::collection::vec(0.0f64..3.0, n)).prop_map(
                    move |(set, extra)| {
                        let mut offs: Vec<Offset> = vec![0];
                        offs.extend(set);
                        let costs = offs.iter().zip(&extra).map(|(c, x)| (e - c) as f64 * (1.0 + x)).collect();
                        (offs, costs, e, masses.clone(), q)
                    },
                )
            },
        )
    }

    proptest! {
        #[test]
        fn agrees_with_memoized_recursion((offs, costs, e, masses, q) in instance()) {
            prop_assume!(masses.iter().sum::<f64>() > 0.0);
            let pi = Belief::equal_width(&masses).unwrap();
            let (i, _) = tokpol_select(&offs, &costs, e, &pi, q).unwrap();
            let (o, _) = oracle(&offs, &costs, e, &pi, q);
            prop_assert_eq!(offs[i], o);
        }

        #[test]
        fn choice_invariant_under_cost_scaling((offs, costs, e, masses, q) in instance(), k in 0.01f64..100.0) {
            prop_assume!(masses.iter().sum::<f64>() > 0.0);
            let pi = Belief::equal_width(&masses).unwrap();
            let (i, _) = tokpol_select(&offs, &costs, e, &pi, q).unwrap();
            let scaled: Vec<f64> = costs.iter().map(|c| c * k).collect();
            let (j, _) = tokpol_select(&offs, &scaled, e, &pi, q).unwrap();
            prop_assert_eq!(i, j);
        }
    }
}
