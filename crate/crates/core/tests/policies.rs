use hydra_core::models::{Belief, CostModelParams};
use hydra_core::policies::{
    make_policy, Policy, PolicyAction, PolicyConfig, RandomPolicy, SpawnAction, TokPol, TokPolK, WalkOrder, WalkPolicy,
};
use hydra_core::proto::Meta;
use hydra_core::tree::{NodeId, RolloutId, SearchState, SearchTree};
use serde_json::json;

const TEXT: &[u8] = &[b'x'; 4096];

fn grow(tree: &mut SearchTree, r: RolloutId, to: u64, offs: &[u64]) -> Vec<NodeId> {
    let have = tree.rollout(r).unwrap().generated_end();
    tree.append_generated(r, &TEXT[have as usize..to as usize]).unwrap();
    offs.iter().map(|o| tree.apply_progress(r, *o, "stmt", Meta::new()).unwrap()).collect()
}

fn fail(tree: &mut SearchTree, r: RolloutId, off: u64, cat: &str) -> NodeId {
    tree.apply_error(r, off, cat, "d", Meta::new()).unwrap().node.unwrap()
}

fn spawns(actions: &[PolicyAction]) -> Vec<&SpawnAction> {
    actions
        .iter()
        .filter_map(|a| match a {
            PolicyAction::Spawn(s) => Some(s),
            _ => None,
        })
        .collect()
}

fn kills(actions: &[PolicyAction]) -> Vec<RolloutId> {
    actions
        .iter()
        .filter_map(|a| match a {
            PolicyAction::Kill { rollout } => Some(*rollout),
            _ => None,
        })
        .collect()
}

/// Applies the spawns of `actions` to the tree and reports them back.
fn execute(tree: &mut SearchTree, policy: &mut dyn Policy, actions: &[PolicyAction]) -> Vec<RolloutId> {
    let mut out = Vec::new();
    for a in actions {
        match a {
            PolicyAction::Spawn(s) => {
                let r = tree.spawn_rollout(s.start).unwrap();
                policy.on_spawned(s.group, r);
                out.push(r);
            }
            PolicyAction::Kill { rollout } => {
                tree.finish(*rollout, hydra_core::tree::RolloutStatus::Killed).unwrap();
            }
            _ => {}
        }
    }
    out
}

fn notify(tree: &SearchTree, policy: &mut dyn Policy, node: NodeId, cur: RolloutId) -> Vec<PolicyAction> {
    let state = SearchState { tree, cur };
    policy.on_node(tree.node(node), &state)
}

#[test]
fn tokpol_acts_only_on_errors() {
    let mut tree = SearchTree::new();
    let mut p = TokPol::new(PolicyConfig::default(), CostModelParams::default(), Belief::default_prior());
    let start = p.start(&SearchState { tree: &tree, cur: RolloutId(0) });
    assert_eq!(spawns(&start).len(), 1);
    let r = execute(&mut tree, &mut p, &start)[0];
    let nodes = grow(&mut tree, r, 300, &[50, 120, 250]);
    for n in nodes {
        assert!(notify(&tree, &mut p, n, r).is_empty());
    }
    let err = fail(&mut tree, r, 280, "type_error");
    let acts = notify(&tree, &mut p, err, r);
    assert_eq!(acts.len(), 1);
    assert_eq!(spawns(&acts).len(), 1);
}

#[test]
fn tokpol_episode_rules() {
    let mut tree = SearchTree::new();
    let cfg = PolicyConfig { theta: 64, ..PolicyConfig::default() };
    let prior = Belief::default_prior();
    let mut p = TokPol::new(cfg, CostModelParams::default(), prior.clone());
    let r0 = tree.spawn_rollout(tree.root()).unwrap();
    grow(&mut tree, r0, 600, &[100, 200, 300, 400]);
    let e0 = fail(&mut tree, r0, 500, "type_error");
    let acts = notify(&tree, &mut p, e0, r0);
    assert_eq!(p.belief(), &prior);
    let r1 = execute(&mut tree, &mut p, &acts)[0];
    let start1 = tree.rollout(r1).unwrap().start_offset;
    assert!(start1 < 500);

    // Ten bytes past the target, same category: same episode.
    grow(&mut tree, r1, 520, &[]);
    let e1 = fail(&mut tree, r1, 510, "type_error");
    let acts = notify(&tree, &mut p, e1, r1);
    assert_eq!(p.target().unwrap().offset, 500);
    let x = (500 - start1) as f64 / 500.0;
    let expect = hydra_core::models::cond_fail_x(&prior, x, 0.5);
    assert_eq!(p.belief(), &expect);

    // A second failure from the same start compounds the update.
    let r2 = execute(&mut tree, &mut p, &acts)[0];
    let start2 = tree.rollout(r2).unwrap().start_offset;
    grow(&mut tree, r2, 505, &[]);
    let e2 = fail(&mut tree, r2, 502, "type_error");
    notify(&tree, &mut p, e2, r2);
    let expect = hydra_core::models::cond_fail_x(&expect, (500 - start2) as f64 / 500.0, 0.5);
    assert_eq!(p.belief(), &expect);

    // 200 bytes further with a new category resets to the prior.
    let r3 = tree.spawn_rollout(tree.root()).unwrap();
    grow(&mut tree, r3, 800, &[650]);
    let e3 = fail(&mut tree, r3, 700, "syntax_error");
    notify(&tree, &mut p, e3, r3);
    assert_eq!(p.belief(), &prior);
    assert_eq!(p.target().unwrap().offset, 700);
}

#[test]
fn tokpolk_start_and_preemption() {
    let cfg = PolicyConfig { k: 2, alpha: 0.5, ..PolicyConfig::default() };
    let mut tree = SearchTree::new();
    let mut p = TokPolK::new(cfg, CostModelParams::default(), Belief::default_prior());
    let start = p.start(&SearchState { tree: &tree, cur: RolloutId(0) });
    let s = spawns(&start);
    assert_eq!(s.len(), 2);
    assert!(s.iter().all(|a| a.start == tree.root() && (a.params.temperature_delta - 0.2).abs() < 1e-12));
    let rs = execute(&mut tree, &mut p, &start);

    // r0 reaches 300, r1 fails at 1000 with progress past the midpoint.
    let n = grow(&mut tree, rs[0], 300, &[300]);
    notify(&tree, &mut p, n[0], rs[0]);
    let n = grow(&mut tree, rs[1], 1000, &[200, 600, 900]);
    for x in n {
        notify(&tree, &mut p, x, rs[1]);
    }
    let err = fail(&mut tree, rs[1], 1000, "type_error");
    let acts = notify(&tree, &mut p, err, rs[1]);
    assert_eq!(kills(&acts), vec![rs[0]]);
    assert_eq!(spawns(&acts).len(), 2);
    execute(&mut tree, &mut p, &acts);
    assert_eq!(tree.active_rollouts().len(), 2);
}

#[test]
fn tokpolk_two_slow_rollouts_preempted() {
    let cfg = PolicyConfig { k: 3, ..PolicyConfig::default() };
    let mut tree = SearchTree::new();
    let mut p = TokPolK::new(cfg, CostModelParams::default(), Belief::default_prior());
    let start = p.start(&SearchState { tree: &tree, cur: RolloutId(0) });
    let rs = execute(&mut tree, &mut p, &start);
    grow(&mut tree, rs[2], 900, &[100, 400, 800]);
    let err = fail(&mut tree, rs[2], 850, "type_error");
    let acts = notify(&tree, &mut p, err, rs[2]);
    assert_eq!(kills(&acts).len(), 2);
    assert_eq!(spawns(&acts).len(), 3);
    execute(&mut tree, &mut p, &acts);
    assert_eq!(tree.active_rollouts().len(), 3);
}

#[test]
fn tokpolk_within_group_replacement_restores_size() {
    let cfg = PolicyConfig { k: 2, ..PolicyConfig::default() };
    let mut tree = SearchTree::new();
    let mut p = TokPolK::new(cfg, CostModelParams::default(), Belief::default_prior());
    let start = p.start(&SearchState { tree: &tree, cur: RolloutId(0) });
    let rs = execute(&mut tree, &mut p, &start);
    for &r in &rs {
        let n = grow(&mut tree, r, 1200, &[300, 700, 1100]);
        for x in n {
            notify(&tree, &mut p, x, r);
        }
    }
    let err = fail(&mut tree, rs[0], 1150, "type_error");
    let acts = notify(&tree, &mut p, err, rs[0]);
    // r1 is past alpha * e and survives.
    assert!(kills(&acts).is_empty());
    let fresh = execute(&mut tree, &mut p, &acts);
    assert_eq!(tree.active_rollouts().len(), 2);

    let before = p.group_belief(fresh[0]).unwrap().clone();
    let s = tree.rollout(fresh[0]).unwrap().start_offset;
    grow(&mut tree, fresh[0], 1160, &[]);
    let err = fail(&mut tree, fresh[0], 1155, "type_error");
    let acts = notify(&tree, &mut p, err, fresh[0]);
    assert!(kills(&acts).is_empty());
    assert_eq!(spawns(&acts).len(), 1);
    let expect = hydra_core::models::cond_fail(&before, s, 1150, 0.5).unwrap();
    assert_eq!(p.group_belief(fresh[0]).unwrap(), &expect);
    execute(&mut tree, &mut p, &acts);
    assert_eq!(tree.active_rollouts().len(), 2);
}

fn ladder(tree: &mut SearchTree, n: usize) -> (RolloutId, Vec<NodeId>, NodeId) {
    let r = tree.spawn_rollout(tree.root()).unwrap();
    let offs: Vec<u64> = (1..=n as u64).map(|i| i * 100).collect();
    let nodes = grow(tree, r, n as u64 * 100 + 50, &offs);
    let err = fail(tree, r, n as u64 * 100 + 40, "type_error");
    (r, nodes, err)
}

#[test]
fn random_is_seeded_and_uniform() {
    let mut tree = SearchTree::new();
    let (r, _, err) = ladder(&mut tree, 4);
    let cands = tree.ancestor_progress_nodes(err);
    assert_eq!(cands.len(), 5);
    let pick = |seed: u64| {
        let mut p = RandomPolicy::new(PolicyConfig { seed, ..PolicyConfig::default() });
        (0..10).map(|_| spawns(&notify(&tree, &mut p, err, r))[0].start).collect::<Vec<_>>()
    };
    assert_eq!(pick(7), pick(7));

    let mut p = RandomPolicy::new(PolicyConfig { seed: 99, ..PolicyConfig::default() });
    let mut counts = vec![0usize; cands.len()];
    let trials = 10_000;
    for _ in 0..trials {
        let s = spawns(&notify(&tree, &mut p, err, r))[0].start;
        counts[cands.iter().position(|c| *c == s).unwrap()] += 1;
    }
    let exp = trials as f64 / cands.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - exp).powi(2) / exp).sum();
    // 4 degrees of freedom, p = 0.001.
    assert!(chi2 < 18.47, "{chi2} {counts:?}");

    let mut t2 = SearchTree::new();
    let r = t2.spawn_rollout(t2.root()).unwrap();
    t2.append_generated(r, b"abc").unwrap();
    let e = fail(&mut t2, r, 2, "syntax_error");
    assert_eq!(spawns(&notify(&t2, &mut p, e, r))[0].start, t2.root());
}

#[test]
fn statement_walk_advances_then_falls_back_to_root() {
    let mut tree = SearchTree::new();
    let (r, nodes, err) = ladder(&mut tree, 3);
    let mut p = WalkPolicy::new(WalkOrder::Statement, PolicyConfig::default());
    let mut expected = vec![nodes[2], nodes[1], nodes[0], tree.root(), tree.root(), tree.root()];
    expected.reverse();
    let mut acts = notify(&tree, &mut p, err, r);
    loop {
        let s = spawns(&acts)[0];
        assert_eq!(s.start, expected.pop().unwrap());
        if expected.is_empty() {
            break;
        }
        let r = execute(&mut tree, &mut p, &acts)[0];
        let base = tree.rollout(r).unwrap().start_offset;
        grow(&mut tree, r, base + 20, &[]);
        // Same category, within theta: still the same episode.
        let e = fail(&mut tree, r, 340.min(base + 10), "type_error");
        acts = notify(&tree, &mut p, e, r);
    }
}

#[test]
fn statement_attempt_budget() {
    let mut tree = SearchTree::new();
    let (r, nodes, err) = ladder(&mut tree, 2);
    let mut p = WalkPolicy::new(WalkOrder::Statement, PolicyConfig { a: Some(2), ..PolicyConfig::default() });
    let mut acts = notify(&tree, &mut p, err, r);
    let mut seen = Vec::new();
    for _ in 0..5 {
        let s = spawns(&acts)[0].start;
        seen.push(s);
        let r = execute(&mut tree, &mut p, &acts)[0];
        let base = tree.rollout(r).unwrap().start_offset;
        grow(&mut tree, r, base + 5, &[]);
        let e = fail(&mut tree, r, base + 1, "type_error");
        acts = notify(&tree, &mut p, e, r);
    }
    assert_eq!(seen, vec![nodes[1], nodes[1], nodes[0], nodes[0], tree.root()]);
}

#[test]
fn entropy_orders_by_max_entropy_then_offset() {
    let mut tree = SearchTree::new();
    let r = tree.spawn_rollout(tree.root()).unwrap();
    tree.append_generated(r, &TEXT[..600]).unwrap();
    let ents = [0.3, 1.2, 0.3, 0.1, 0.9];
    let mut nodes = Vec::new();
    for (i, h) in ents.iter().enumerate() {
        let mut m = Meta::new();
        m.insert("max_entropy".into(), json!(h));
        nodes.push(tree.apply_progress(r, (i as u64 + 1) * 100, "stmt", m).unwrap());
    }
    let err = fail(&mut tree, r, 550, "type_error");
    let mut p = WalkPolicy::new(WalkOrder::Entropy, PolicyConfig::default());
    assert!(p.wants_logprobs());
    let acts = notify(&tree, &mut p, err, r);
    let s = spawns(&acts)[0];
    assert!(s.params.want_logprobs);
    assert_eq!(s.params.top_k, 128);
    assert_eq!(s.start, nodes[4]);
    // Latest first, then 1.2, then the 0.3 tie with the larger offset,
    // then 0.1, and the root (no entropy) last.
    let order = p.candidates().unwrap().to_vec();
    assert_eq!(order, vec![nodes[4], nodes[1], nodes[2], nodes[0], nodes[3], tree.root()]);
}

#[test]
fn factory_builds_every_policy() {
    for name in hydra_core::policies::POLICY_NAMES {
        let p = make_policy(name, &PolicyConfig::default(), &CostModelParams::default(), &Belief::default_prior()).unwrap();
        assert_eq!(p.name(), name);
    }
    assert!(make_policy("greedy", &PolicyConfig::default(), &CostModelParams::default(), &Belief::default_prior()).is_err());
    let bad = PolicyConfig { k: 0, ..PolicyConfig::default() };
    assert!(make_policy("tokpolk", &bad, &CostModelParams::default(), &Belief::default_prior()).is_err());
}
