//! Planning in the product of the environment and a task FSM.
//!
//! An augmented state pairs an environment state with an FSM node.
//! Primitive actions move the environment, FSM transitions move the node.
//! Transition costs come from the subgoal classifiers:
//! `-λ (ln G_v(s) + ln I_v'(s))`, where the half belonging to a super node
//! is left out.

mod tree;

pub use tree::{log_softmax_neg, rationality, softmax_neg, ActionValue, SearchTree, TreeEdge, TreeNode, SENTINEL_J};

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, GridState, WorldConfig, STEP_COST};
use crate::fsm::{Fsm, FsmNodeId};
use crate::model::Classifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AugmentedState {
    pub s: GridState,
    pub v: FsmNodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentedAction {
    Primitive(Action),
    Transition(FsmNodeId, FsmNodeId),
}

impl fmt::Display for AugmentedAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentedAction::Primitive(a) => write!(f, "{a}"),
            AugmentedAction::Transition(a, b) => write!(f, "fsm {}->{}", a.0, b.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("FSM edge {from}->{to} does not leave the current node {current}")]
    BadTransition { from: u16, to: u16, current: u16 },
    #[error("subgoal `{0}` is not registered in this world")]
    UnknownSubgoal(String),
    #[error("λ must be positive")]
    BadLambda,
}

/// Which open list the next node is popped from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopRule {
    /// Pick an FSM node with a nonempty queue uniformly, pop its cheapest node.
    SampleSubgoal,
    /// Always pop the globally cheapest node (plain uniform-cost search).
    GlobalBest,
    /// Pop from the nonempty queue latest in topological order, so progress
    /// along the FSM is never abandoned for cheaper nodes further back.
    DeepestSubgoal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Return as soon as a terminal node is popped.
    FirstTerminal,
    /// Keep searching until no open node is cheaper than the best terminal
    /// node found, or the budgets run out.
    Exhaust,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub lambda: f64,
    /// Breadth-first layers.
    pub b: usize,
    /// Best-first layers after the breadth-first ones.
    pub c: usize,
    /// Nodes kept per (FSM node, layer) past the first `b` layers.
    pub k: Option<usize>,
    /// Expansions allowed per FSM node.
    pub node_budget: Option<usize>,
    /// Expansions allowed in total.
    pub global_budget: Option<usize>,
    pub pop_rule: PopRule,
    pub stop_rule: StopRule,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig::test()
    }
}

impl PlannerConfig {
    /// Search settings used while training.
    pub fn train() -> Self {
        PlannerConfig {
            lambda: 1.0,
            b: 3,
            c: 15,
            k: Some(10),
            node_budget: Some(5000),
            global_budget: None,
            pop_rule: PopRule::SampleSubgoal,
            stop_rule: StopRule::FirstTerminal,
            seed: 0,
        }
    }

    /// Search settings used at test time.
    pub fn test() -> Self {
        PlannerConfig {
            b: 4,
            c: 25,
            stop_rule: StopRule::Exhaust,
            ..PlannerConfig::train()
        }
    }

    /// No depth, beam or budget limits; exact uniform-cost search.
    pub fn unlimited() -> Self {
        PlannerConfig {
            lambda: 1.0,
            b: usize::MAX / 4,
            c: usize::MAX / 4,
            k: None,
            node_budget: None,
            global_budget: None,
            pop_rule: PopRule::GlobalBest,
            stop_rule: StopRule::FirstTerminal,
            seed: 0,
        }
    }

    fn max_layer(&self) -> usize {
        self.b.saturating_add(self.c)
    }
}

/// The FSM-augmented decision process for one world, task and classifier.
pub struct Product<'a, C: Classifier + ?Sized> {
    pub world: &'a WorldConfig,
    pub fsm: &'a Fsm,
    pub classifier: &'a C,
    pub lambda: f64,
    labels: Vec<Option<usize>>,
}

impl<'a, C: Classifier + ?Sized> Product<'a, C> {
    pub fn new(world: &'a WorldConfig, fsm: &'a Fsm, classifier: &'a C, lambda: f64) -> Result<Self, PlanError> {
        if !(lambda > 0.0) {
            return Err(PlanError::BadLambda);
        }
        let labels = fsm
            .nodes()
            .map(|v| match fsm.label(v) {
                None => Ok(None),
                Some(name) => world
                    .subgoal_index(name)
                    .map(Some)
                    .map_err(|_| PlanError::UnknownSubgoal(name.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Product {
            world,
            fsm,
            classifier,
            lambda,
            labels,
        })
    }

    /// Registry index of the subgoal labelling `v`.
    pub fn subgoal_of(&self, v: FsmNodeId) -> Option<usize> {
        self.labels[v.index()]
    }

    pub fn start(&self, s: GridState) -> AugmentedState {
        AugmentedState { s, v: self.fsm.v0() }
    }

    pub fn is_terminal(&self, x: &AugmentedState) -> bool {
        x.v == self.fsm.vt()
    }

    pub fn transition(&self, x: &AugmentedState, a: AugmentedAction) -> Result<AugmentedState, PlanError> {
        match a {
            AugmentedAction::Primitive(p) => Ok(AugmentedState {
                s: self.world.transition(&x.s, p),
                v: x.v,
            }),
            AugmentedAction::Transition(from, to) => {
                if from != x.v || !self.fsm.has_edge(from, to) {
                    return Err(PlanError::BadTransition {
                        from: from.0,
                        to: to.0,
                        current: x.v.0,
                    });
                }
                Ok(AugmentedState { s: x.s, v: to })
            }
        }
    }

    pub fn cost(&self, x: &AugmentedState, a: AugmentedAction) -> f64 {
        match a {
            AugmentedAction::Primitive(_) => STEP_COST,
            AugmentedAction::Transition(from, to) => self.transition_cost(&x.s, from, to),
        }
    }

    /// `-λ (ln G_from(s) + ln I_to(s))`, dropping terms of super nodes.
    pub fn transition_cost(&self, s: &GridState, from: FsmNodeId, to: FsmNodeId) -> f64 {
        -self.lambda * self.transition_log_terms(s, from, to)
    }

    /// `ln G_from(s) + ln I_to(s)` without super-node terms.
    pub fn transition_log_terms(&self, s: &GridState, from: FsmNodeId, to: FsmNodeId) -> f64 {
        let mut total = 0.0;
        if let Some(o) = self.labels[from.index()] {
            total += self.classifier.log_goal(self.world, o, s);
        }
        if let Some(o) = self.labels[to.index()] {
            total += self.classifier.log_init(self.world, o, s);
        }
        total
    }

    /// Primitive actions followed by the FSM transitions out of `x.v`.
    pub fn actions(&self, x: &AugmentedState) -> Vec<AugmentedAction> {
        let mut out = Vec::with_capacity(Action::ALL.len() + 2);
        if self.labels[x.v.index()].is_some() {
            out.extend(Action::ALL.iter().map(|&a| AugmentedAction::Primitive(a)));
        }
        out.extend(
            self.fsm
                .successors(x.v)
                .iter()
                .map(|&to| AugmentedAction::Transition(x.v, to)),
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub states: Vec<AugmentedState>,
    pub actions: Vec<AugmentedAction>,
    pub cost: f64,
    pub expanded: usize,
}

impl Plan {
    pub fn primitive_actions(&self) -> Vec<Action> {
        self.actions
            .iter()
            .filter_map(|a| match a {
                AugmentedAction::Primitive(p) => Some(*p),
                AugmentedAction::Transition(..) => None,
            })
            .collect()
    }

    /// Environment states with consecutive duplicates from FSM moves removed.
    pub fn env_states(&self) -> Vec<GridState> {
        let mut out = vec![self.states[0].s];
        for (a, x) in self.actions.iter().zip(&self.states[1..]) {
            if matches!(a, AugmentedAction::Primitive(_)) {
                out.push(x.s);
            }
        }
        out
    }

    /// One line per step: action, cumulative cost, FSM node, agent and
    /// inventory.
    pub fn trace<C: Classifier + ?Sized>(&self, product: &Product<'_, C>) -> String {
        let mut out = String::new();
        let mut total = 0.0;
        let _ = writeln!(out, "start\t{:.4}\t{}", total, summary(product, &self.states[0]));
        for (a, (x, next)) in self.actions.iter().zip(self.states.iter().zip(&self.states[1..])) {
            total += product.cost(x, *a);
            let _ = writeln!(out, "{a}\t{total:.4}\t{}", summary(product, next));
        }
        out
    }
}

fn summary<C: Classifier + ?Sized>(product: &Product<'_, C>, x: &AugmentedState) -> String {
    let inv: Vec<String> = crate::env::Item::ALL
        .iter()
        .filter(|i| x.s.has(**i))
        .map(|i| format!("{i}x{}", x.s.count(*i)))
        .collect();
    format!(
        "{}\tagent=({},{})\tinv=[{}]",
        product.fsm.node_name(x.v),
        x.s.agent.0,
        x.s.agent.1,
        inv.join(",")
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanFailure {
    pub expanded: usize,
}

#[derive(Clone, Copy)]
struct QueueKey {
    g: f64,
    seq: u64,
    node: u32,
}

impl PartialEq for QueueKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueKey {}

impl PartialOrd for QueueKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueKey {
    // Reversed so BinaryHeap pops the smallest (g, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other.g.total_cmp(&self.g).then(other.seq.cmp(&self.seq))
    }
}

struct SearchNode {
    x: AugmentedState,
    g: f64,
    layer: usize,
    parent: Option<(u32, AugmentedAction)>,
}

/// Modified A* with a zero heuristic from `start` to any terminal node.
pub fn plan<C: Classifier + ?Sized>(
    product: &Product<'_, C>,
    config: &PlannerConfig,
    start: AugmentedState,
) -> Result<Plan, PlanFailure> {
    let fsm = product.fsm;
    let n_v = fsm.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut nodes: Vec<SearchNode> = Vec::new();
    let mut best_g: HashMap<AugmentedState, f64> = HashMap::new();
    let mut queues: Vec<BinaryHeap<QueueKey>> = (0..n_v).map(|_| BinaryHeap::new()).collect();
    let mut expanded_at = vec![0usize; n_v];
    let mut beam: HashMap<(FsmNodeId, usize), usize> = HashMap::new();
    let mut seq = 0u64;
    let mut expanded = 0usize;
    let mut found: Option<u32> = None;

    let mut push = |nodes: &mut Vec<SearchNode>,
                    queues: &mut Vec<BinaryHeap<QueueKey>>,
                    best_g: &mut HashMap<AugmentedState, f64>,
                    node: SearchNode| {
        if !node.g.is_finite() {
            return;
        }
        match best_g.get(&node.x) {
            Some(&g) if g <= node.g => return,
            _ => {}
        }
        best_g.insert(node.x, node.g);
        let id = nodes.len() as u32;
        queues[node.x.v.index()].push(QueueKey { g: node.g, seq, node: id });
        seq += 1;
        nodes.push(node);
    };

    push(
        &mut nodes,
        &mut queues,
        &mut best_g,
        SearchNode {
            x: start,
            g: 0.0,
            layer: 0,
            parent: None,
        },
    );

    let budget_open = |v: usize, expanded_at: &[usize]| config.node_budget.map_or(true, |b| expanded_at[v] < b);
    let vt = fsm.vt().index();
    let mut rank = vec![0usize; n_v];
    for (i, v) in fsm.order().iter().enumerate() {
        rank[v.index()] = i;
    }

    loop {
        if config.global_budget.is_some_and(|b| expanded >= b) {
            break;
        }
        let bound = found.map_or(f64::INFINITY, |f| nodes[f as usize].g);
        for q in queues.iter_mut() {
            if q.peek().is_some_and(|k| k.g >= bound) {
                q.clear();
            }
        }
        let candidates: Vec<usize> = (0..n_v)
            .filter(|&v| !queues[v].is_empty() && (v == vt || budget_open(v, &expanded_at)))
            .collect();
        if candidates.is_empty() {
            break;
        }
        let v = match config.pop_rule {
            PopRule::SampleSubgoal => candidates[rng.gen_range(0..candidates.len())],
            PopRule::GlobalBest => *candidates
                .iter()
                .max_by(|&&a, &&b| queues[a].peek().unwrap().cmp(queues[b].peek().unwrap()))
                .unwrap(),
            PopRule::DeepestSubgoal => *candidates.iter().max_by_key(|&&v| rank[v]).unwrap(),
        };
        let key = queues[v].pop().unwrap();
        let id = key.node;
        let (x, g, layer) = {
            let n = &nodes[id as usize];
            (n.x, n.g, n.layer)
        };
        if best_g.get(&x).is_some_and(|&b| b < g) {
            continue;
        }
        if v == vt {
            if found.map_or(true, |f| nodes[f as usize].g > g) {
                found = Some(id);
            }
            if config.stop_rule == StopRule::FirstTerminal {
                break;
            }
            continue;
        }
        if layer >= config.b {
            if let Some(k) = config.k {
                let count = beam.entry((x.v, layer)).or_insert(0);
                if *count >= k {
                    continue;
                }
                *count += 1;
            }
        }
        expanded += 1;
        expanded_at[v] += 1;
        if product.subgoal_of(x.v).is_some() && layer < config.max_layer() {
            for &a in Action::ALL {
                let next = AugmentedState {
                    s: product.world.transition(&x.s, a),
                    v: x.v,
                };
                push(
                    &mut nodes,
                    &mut queues,
                    &mut best_g,
                    SearchNode {
                        x: next,
                        g: g + STEP_COST,
                        layer: layer + 1,
                        parent: Some((id, AugmentedAction::Primitive(a))),
                    },
                );
            }
        }
        for &to in fsm.successors(x.v) {
            let cost = product.transition_cost(&x.s, x.v, to);
            push(
                &mut nodes,
                &mut queues,
                &mut best_g,
                SearchNode {
                    x: AugmentedState { s: x.s, v: to },
                    g: g + cost,
                    layer: 0,
                    parent: Some((id, AugmentedAction::Transition(x.v, to))),
                },
            );
        }
    }

    let Some(end) = found else {
        return Err(PlanFailure { expanded });
    };
    let mut states = vec![nodes[end as usize].x];
    let mut actions = Vec::new();
    let mut cur = end;
    while let Some((parent, a)) = nodes[cur as usize].parent {
        actions.push(a);
        states.push(nodes[parent as usize].x);
        cur = parent;
    }
    states.reverse();
    actions.reverse();
    Ok(Plan {
        states,
        actions,
        cost: nodes[end as usize].g,
        expanded,
    })
}
