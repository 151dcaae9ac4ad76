//! Independent oracles shared by the integration tests and the acceptance run.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;

use rsg_core::demo::{generate_demo, Demonstration};
use rsg_core::env::{features, Action, GoalPredicate, GridState, Item, ObjectKind, Rules, WorldConfig, FEATURE_COUNT};
use rsg_core::fsm::{compile, Fsm, FsmNodeId};
use rsg_core::learner::{align, demo_tree, ScoreTables, ScoredSample, TrainConfig};
use rsg_core::model::{Theta, Which};
use rsg_core::planner::{plan, PlannerConfig, Product};
use rsg_core::tl::{enumerate_tasks, TaskAst};
use rsg_core::world::WorldSpec;

// ---------------------------------------------------------------------------
// Satisfaction, straight from the recursive definition.

/// Whether states `lo..=hi` satisfy `task`. No memoization, no shortcuts.
pub fn brute_satisfies(truth: &dyn Fn(&str, usize) -> bool, task: &TaskAst, lo: usize, hi: usize) -> bool {
    match task {
        TaskAst::Atom(o) => hi > lo && !truth(o.as_str(), lo) && truth(o.as_str(), hi),
        TaskAst::Then(cs) => brute_chain(truth, cs, lo, hi),
        TaskAst::Or(cs) => cs.iter().any(|c| brute_satisfies(truth, c, lo, hi)),
        TaskAst::And(cs) => permutations(cs.len()).iter().any(|p| {
            let ordered: Vec<TaskAst> = p.iter().map(|&i| cs[i].clone()).collect();
            brute_chain(truth, &ordered, lo, hi)
        }),
    }
}

fn brute_chain(truth: &dyn Fn(&str, usize) -> bool, cs: &[TaskAst], lo: usize, hi: usize) -> bool {
    if cs.len() == 1 {
        return brute_satisfies(truth, &cs[0], lo, hi);
    }
    (lo + 1..hi).any(|j| brute_satisfies(truth, &cs[0], lo, j) && brute_chain(truth, &cs[1..], j, hi))
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..=p.len() {
            let mut q = p.clone();
            q.insert(slot, n - 1);
            out.push(q);
        }
    }
    out
}

/// Random task over `a`, `b`, `c` with exactly `leaves` leaves.
pub fn random_task(rng: &mut impl Rng, leaves: usize) -> TaskAst {
    if leaves == 1 {
        return TaskAst::atom(["a", "b", "c"][rng.gen_range(0..3)]);
    }
    let parts = rng.gen_range(2..=leaves);
    let mut sizes = vec![1; parts];
    for _ in parts..leaves {
        sizes[rng.gen_range(0..parts)] += 1;
    }
    let children = sizes.into_iter().map(|k| random_task(rng, k)).collect();
    match rng.gen_range(0..3) {
        0 => TaskAst::Then(children),
        1 => TaskAst::Or(children),
        _ => TaskAst::And(children),
    }
}

/// Truth table `bits[atom][state]` for atoms a, b, c.
pub fn random_bits(rng: &mut impl Rng, len: usize) -> Vec<Vec<bool>> {
    (0..3).map(|_| (0..len).map(|_| rng.gen_bool(0.5)).collect()).collect()
}

pub fn lookup(bits: &[Vec<bool>]) -> impl Fn(&str, usize) -> bool + '_ {
    move |name, i| bits[(name.as_bytes()[0] - b'a') as usize][i]
}

// ---------------------------------------------------------------------------
// FSM shape, counted from the construction rules.

/// (labeled nodes, internal edges, start nodes, terminal nodes) of a
/// fragment built only from atoms, `then` and `or`.
pub fn fragment_counts(task: &TaskAst) -> (usize, usize, usize, usize) {
    match task {
        TaskAst::Atom(_) => (1, 0, 1, 1),
        TaskAst::Then(cs) => {
            let parts: Vec<_> = cs.iter().map(fragment_counts).collect();
            let nodes = parts.iter().map(|p| p.0).sum();
            let mut edges: usize = parts.iter().map(|p| p.1).sum();
            for w in parts.windows(2) {
                edges += w[0].3 * w[1].2;
            }
            (nodes, edges, parts[0].2, parts[parts.len() - 1].3)
        }
        TaskAst::Or(cs) => cs.iter().map(fragment_counts).fold((0, 0, 0, 0), |a, b| {
            (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3)
        }),
        TaskAst::And(_) => panic!("counter covers then/or only"),
    }
}

/// Total (nodes, edges) including `v0`, `vT` and their edges.
pub fn expected_shape(task: &TaskAst) -> (usize, usize) {
    let (n, e, s, t) = fragment_counts(task);
    (n + 2, e + s + t)
}

/// Twenty then/or tasks with node and edge totals worked out by hand.
pub const GOLDEN_SHAPES: [(&str, usize, usize); 20] = [
    ("a", 3, 2),
    ("a then b", 4, 3),
    ("a then b then c", 5, 4),
    ("a or b", 4, 4),
    ("a or b or c", 5, 6),
    ("(a or b) then c", 5, 5),
    ("a then (b or c)", 5, 5),
    ("(a or b) then (c or d)", 6, 8),
    ("(a then b) or c", 5, 5),
    ("(a then b) or (c then d)", 6, 6),
    ("a then b then c then d", 6, 5),
    ("(a or b or c) then d", 6, 7),
    ("((a or b) then c) or d", 6, 7),
    ("(a or b) then (c or d) then e", 7, 9),
    ("a then (b or (c then d))", 6, 6),
    ("(a then b) or (c then d) or e", 7, 8),
    ("(a or b) then c then (d or e)", 7, 8),
    ("((a then b) or c) then d", 6, 6),
    ("a or (b then (c or d))", 6, 7),
    ("(a or b) then (c or d or e)", 7, 11),
];

/// Every `v0 -> vT` path through `fsm`, as node lists.
pub fn all_paths(fsm: &Fsm) -> Vec<Vec<FsmNodeId>> {
    fn walk(fsm: &Fsm, v: FsmNodeId, path: &mut Vec<FsmNodeId>, out: &mut Vec<Vec<FsmNodeId>>) {
        path.push(v);
        if v == fsm.vt() {
            out.push(path.clone());
        } else {
            for &w in fsm.successors(v) {
                walk(fsm, w, path, out);
            }
        }
        path.pop();
    }
    let mut out = Vec::new();
    walk(fsm, fsm.v0(), &mut Vec::new(), &mut out);
    out
}

// ---------------------------------------------------------------------------
// Worlds and classifiers.

pub fn random_theta(world: &WorldConfig, rng: &mut impl Rng, scale: f64) -> Theta {
    let mut theta = Theta::for_world(world);
    let params: Vec<f64> = (0..theta.param_count()).map(|_| rng.gen_range(-scale..scale)).collect();
    theta.set_params(&params);
    theta
}

/// Linear classifiers that track the ground-truth predicates closely:
/// `G_o` keys on the subgoal's item, `I_o` on its absence.
pub fn sharp_theta(world: &WorldConfig, weight: f64) -> Theta {
    let rules = world.rules();
    let mut theta = Theta::for_world(world);
    for (o, sub) in rules.subgoals.iter().enumerate() {
        let feature = match sub.predicate {
            GoalPredicate::Has(item) => item.index(),
            GoalPredicate::SwitchOn => FEATURE_COUNT - 2,
        };
        let g = theta.row_mut(Which::G, o);
        g[feature] = weight;
        g[FEATURE_COUNT] = -weight / 2.0;
        let i = theta.row_mut(Which::I, o);
        i[feature] = -weight;
        i[FEATURE_COUNT] = weight / 2.0;
    }
    theta
}

/// A random open floor of at most 7x7 with a few objects and walls.
pub fn random_small_spec(rng: &mut impl Rng) -> WorldSpec {
    let kinds = [
        ObjectKind::Axe,
        ObjectKind::Tree,
        ObjectKind::Workbench,
        ObjectKind::Pickaxe,
        ObjectKind::CoalOre,
    ];
    let w = rng.gen_range(3..=7);
    let h = rng.gen_range(3..=7);
    let count = rng.gen_range(1..=kinds.len().min(w * h - 2));
    let chosen: Vec<(ObjectKind, usize)> = kinds.choose_multiple(rng, count).map(|&k| (k, 1)).collect();
    let mut spec = WorldSpec::random(w, h, &chosen);
    spec.walls = rng.gen_range(0..=(w * h - count - 1).min(3));
    spec
}

pub const SMALL_SUBGOALS: [&str; 5] = ["grab-axe", "mine-wood", "craft-wood-plank", "grab-pickaxe", "mine-coal"];

/// A then/or task over `SMALL_SUBGOALS` with at most `max_nodes` labeled
/// FSM nodes.
pub fn random_small_task(rng: &mut impl Rng, max_nodes: usize, allow_and: bool) -> TaskAst {
    loop {
        let leaves = rng.gen_range(1..=max_nodes.min(3));
        let task = random_named_task(rng, leaves, allow_and);
        if compile(&task).labeled_count() <= max_nodes {
            return task;
        }
    }
}

fn random_named_task(rng: &mut impl Rng, leaves: usize, allow_and: bool) -> TaskAst {
    if leaves == 1 {
        return TaskAst::atom(SMALL_SUBGOALS.choose(rng).unwrap());
    }
    let parts = rng.gen_range(2..=leaves);
    let mut sizes = vec![1; parts];
    for _ in parts..leaves {
        sizes[rng.gen_range(0..parts)] += 1;
    }
    let children = sizes.into_iter().map(|k| random_named_task(rng, k, allow_and)).collect();
    match rng.gen_range(0..if allow_and { 3 } else { 2 }) {
        0 => TaskAst::Then(children),
        1 => TaskAst::Or(children),
        _ => TaskAst::And(children),
    }
}

// ---------------------------------------------------------------------------
// Product-graph shortest path.

#[derive(PartialEq)]
struct Open(f64, GridState, FsmNodeId);

impl Eq for Open {}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0)
    }
}

/// Cheapest cost from `(s0, v0)` to any `(s, vT)`: moves cost 0.1 inside
/// labeled nodes, an FSM edge `u -> w` at `s` costs
/// `-λ (ln G_u(s) + ln I_w(s))` with super-node terms left out.
pub fn dijkstra(world: &WorldConfig, fsm: &Fsm, theta: &Theta, lambda: f64, s0: GridState) -> Option<f64> {
    let label = |v: FsmNodeId| fsm.label(v).map(|n| theta.index_of(n).unwrap());
    let mut dist: HashMap<(GridState, FsmNodeId), f64> = HashMap::new();
    let mut heap = BinaryHeap::new();
    dist.insert((s0, fsm.v0()), 0.0);
    heap.push(Open(0.0, s0, fsm.v0()));
    while let Some(Open(d, s, v)) = heap.pop() {
        if d > dist[&(s, v)] {
            continue;
        }
        if v == fsm.vt() {
            return Some(d);
        }
        let phi = features(&s, world);
        let mut next: Vec<(GridState, FsmNodeId, f64)> = Vec::new();
        if label(v).is_some() {
            for &a in Action::ALL {
                next.push((world.transition(&s, a), v, 0.1));
            }
        }
        for &w in fsm.successors(v) {
            let mut c = 0.0;
            if let Some(o) = label(v) {
                c -= lambda * theta.log_eval(Which::G, o, phi);
            }
            if let Some(o) = label(w) {
                c -= lambda * theta.log_eval(Which::I, o, phi);
            }
            next.push((s, w, c));
        }
        for (t, w, c) in next {
            let nd = d + c;
            if dist.get(&(t, w)).is_none_or(|&old| nd < old) {
                dist.insert((t, w), nd);
                heap.push(Open(nd, t, w));
            }
        }
    }
    None
}

/// Plan cost from `plan()` with no limits and the Dijkstra cost, for one
/// random world, task and classifier.
pub fn planner_vs_dijkstra(rng: &mut impl Rng) -> (Option<f64>, Option<f64>) {
    let spec = random_small_spec(rng);
    let task = random_small_task(rng, 3, false);
    let sc = spec.sample(rng.gen(), Some(&task)).unwrap();
    let theta = random_theta(&sc.world, rng, 2.0);
    let fsm = compile(&task);
    let product = Product::new(&sc.world, &fsm, &theta, 1.0).unwrap();
    let config = PlannerConfig {
        seed: rng.gen(),
        ..PlannerConfig::unlimited()
    };
    let got = plan(&product, &config, product.start(sc.start)).ok().map(|p| {
        let mut total = 0.0;
        for (x, a) in p.states.iter().zip(&p.actions) {
            total += product.cost(x, *a);
        }
        assert!((total - p.cost).abs() <= 1e-9, "plan cost {} but its steps sum to {total}", p.cost);
        p.cost
    });
    let want = dijkstra(&sc.world, &fsm, &theta, 1.0, sc.start);
    (got, want)
}

// ---------------------------------------------------------------------------
// Alignment by enumeration.

/// Best alignment score over every FSM path and every placement of its
/// transitions on the trajectory steps.
pub fn brute_alignment(fsm: &Fsm, tables: &ScoreTables) -> f64 {
    all_paths(fsm)
        .iter()
        .map(|path| place(fsm, tables, path, 0, 0))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Best total for transitions `k..` of `path`, where transition `k - 1`
/// happened at step `prev`. The first transition is at step 0 (nothing is
/// observed in `v0`) and the last at the final step.
fn place(fsm: &Fsm, tables: &ScoreTables, path: &[FsmNodeId], k: usize, prev: usize) -> f64 {
    let n = tables.n;
    let m = path.len() - 1;
    if k == m {
        return 0.0;
    }
    let edge = fsm.edges().iter().position(|&e| e == (path[k], path[k + 1])).unwrap();
    let steps: Vec<usize> = if k == 0 {
        vec![0]
    } else if k == m - 1 {
        vec![n - 1]
    } else {
        (prev..n).collect()
    };
    let mut best = f64::NEG_INFINITY;
    for t in steps {
        if t < prev {
            continue;
        }
        let stay: f64 = if k == 0 { 0.0 } else { (prev..t).map(|i| tables.stay[i][path[k].index()]).sum() };
        let total = stay + tables.trans[t][edge] + place(fsm, tables, path, k + 1, t);
        best = best.max(total);
    }
    best
}

/// A random walk of `len` actions in a random small world.
pub fn random_demo(rng: &mut impl Rng, task: TaskAst, len: usize) -> Demonstration {
    let spec = random_small_spec(rng);
    let sc = spec.sample(rng.gen(), Some(&task)).unwrap();
    let mut states = vec![sc.start];
    let mut actions = Vec::with_capacity(len);
    for _ in 0..len {
        let a = *Action::ALL.choose(rng).unwrap();
        states.push(sc.world.transition(states.last().unwrap(), a));
        actions.push(a);
    }
    Demonstration {
        task,
        world: sc.world,
        states,
        actions,
    }
}

/// DP score and enumerated best alignment for one random demo, task and
/// classifier.
pub fn dp_vs_brute(rng: &mut impl Rng) -> (f64, f64) {
    let task = random_small_task(rng, 5, true);
    let len = rng.gen_range(1..=9);
    let demo = random_demo(rng, task.clone(), len);
    let theta = random_theta(&demo.world, rng, 2.0);
    let config = TrainConfig::default();
    let fsm = compile(&task);
    let product = Product::new(&demo.world, &fsm, &theta, config.lambda).unwrap();
    let tree = demo_tree(&demo, &product, &config.planner);
    let tables = ScoreTables::compute(&demo, &product, &tree, config.alpha, None);
    let (dp, _) = align(&fsm, &tables);
    (dp, brute_alignment(&fsm, &tables))
}

// ---------------------------------------------------------------------------
// Gradient check.

/// Rules with only `grab-axe` and `mine-wood`.
pub fn two_subgoal_spec() -> WorldSpec {
    let mut rules = Rules::default();
    rules.subgoals.retain(|s| matches!(s.predicate, GoalPredicate::Has(Item::Axe) | GoalPredicate::Has(Item::Wood)));
    let mut spec = WorldSpec::random(4, 4, &[(ObjectKind::Axe, 1), (ObjectKind::Tree, 1)]);
    spec.rules = Some(rules);
    spec
}

/// Largest relative error between the analytic gradient of the full
/// objective and central differences, both with the tree and alignments
/// frozen at `theta`.
pub fn gradient_error(rng: &mut impl Rng) -> f64 {
    let spec = two_subgoal_spec();
    let tasks = ["grab-axe", "mine-wood", "grab-axe then mine-wood"];
    let task: TaskAst = tasks.choose(rng).unwrap().parse().unwrap();
    let demo = generate_demo(&spec, &task, rng.gen(), 0.1).unwrap();
    let theta = random_theta(&demo.world, rng, 1.0);
    let pool = enumerate_tasks(theta.subgoals(), 2);
    let truth = task.canonical();
    let mut negatives: Vec<TaskAst> = pool.into_iter().filter(|t| *t != truth).collect();
    negatives.shuffle(rng);
    negatives.truncate(4);
    let config = TrainConfig::default();
    let sample = ScoredSample::new(&demo, &negatives, &theta, &config).unwrap();
    let analytic = sample.gradient(&demo, &theta, &config);
    let base = theta.params();
    let h = 1e-5;
    let mut numeric = vec![0.0; base.len()];
    let mut probe = theta.clone();
    for (j, slot) in numeric.iter_mut().enumerate() {
        let mut p = base.clone();
        p[j] = base[j] + h;
        probe.set_params(&p);
        let up = sample.frozen_objective(&demo, &probe, &config);
        p[j] = base[j] - h;
        probe.set_params(&p);
        let down = sample.frozen_objective(&demo, &probe, &config);
        *slot = (up - down) / (2.0 * h);
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let size = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    assert!(size > 0.0, "gradient vanished");
    diff / size
}

/// 8x8 floor with the standard objects and four keys nobody needs.
pub fn goal_world() -> WorldSpec {
    let mut kinds: Vec<(ObjectKind, usize)> = ObjectKind::ALL.iter().map(|&k| (k, 1)).collect();
    for e in &mut kinds {
        if e.0 == ObjectKind::Key {
            e.1 = 4;
        }
    }
    WorldSpec::random(8, 8, &kinds)
}
