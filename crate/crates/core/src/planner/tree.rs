//! Search trees over augmented states, cost-to-go and rationality.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use super::{AugmentedAction, AugmentedState, PlannerConfig, Product};
use crate::env::{Action, STEP_COST};
use crate::model::Classifier;

/// Cost-to-go of actions that leave the tree or cannot reach the terminal.
pub const SENTINEL_J: f64 = 1.0e4;

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub x: AugmentedState,
    /// Primitive steps from the nearest root.
    pub layer: usize,
    /// Accumulated cost from the nearest root when first reached.
    pub g: f64,
    pub expanded: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct TreeEdge {
    pub from: u32,
    pub to: u32,
    pub action: AugmentedAction,
}

/// Expanded graph of augmented states with costs and cost-to-go values.
///
/// States reached twice share one node, so the "tree" is really a graph;
/// value iteration handles that directly.
#[derive(Debug, Clone)]
pub struct SearchTree {
    pub nodes: Vec<TreeNode>,
    pub edges: Vec<TreeEdge>,
    out: Vec<Vec<u32>>,
    index: HashMap<AugmentedState, u32>,
    /// Edge costs from the last value iteration.
    pub cost: Vec<f64>,
    /// Minimum cost-to-go per node (`SENTINEL_J` if the terminal is out of reach).
    pub value: Vec<f64>,
    /// Edge achieving `value`, if any.
    pub best: Vec<Option<u32>>,
    /// Nodes in the order their values became final (increasing value).
    pub order: Vec<u32>,
}

/// Value of one applicable action at a node.
#[derive(Debug, Clone, Copy)]
pub struct ActionValue {
    pub action: AugmentedAction,
    pub edge: Option<u32>,
    pub j: f64,
}

impl SearchTree {
    fn empty() -> Self {
        SearchTree {
            nodes: Vec::new(),
            edges: Vec::new(),
            out: Vec::new(),
            index: HashMap::new(),
            cost: Vec::new(),
            value: Vec::new(),
            best: Vec::new(),
            order: Vec::new(),
        }
    }

    pub fn node_of(&self, x: &AugmentedState) -> Option<u32> {
        self.index.get(x).copied()
    }

    pub fn out_edges(&self, n: u32) -> &[u32] {
        &self.out[n as usize]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn insert(&mut self, x: AugmentedState, layer: usize, g: f64) -> u32 {
        if let Some(&id) = self.index.get(&x) {
            let node = &mut self.nodes[id as usize];
            if !node.expanded && layer < node.layer {
                node.layer = layer;
            }
            if g < node.g {
                node.g = g;
            }
            return id;
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(TreeNode {
            x,
            layer,
            g,
            expanded: false,
        });
        self.out.push(Vec::new());
        self.index.insert(x, id);
        id
    }

    fn add_edge(&mut self, from: u32, to: u32, action: AugmentedAction) {
        self.out[from as usize].push(self.edges.len() as u32);
        self.edges.push(TreeEdge { from, to, action });
    }

    /// Expand from `roots` FSM node by FSM node in topological order: for
    /// each node, breadth-first for `b` layers, then the `k` cheapest nodes
    /// per layer up to layer `b + c`, then every FSM transition from every
    /// node there. Values are filled in before returning.
    pub fn build<C: Classifier + ?Sized>(
        product: &Product<'_, C>,
        config: &PlannerConfig,
        roots: &[AugmentedState],
    ) -> SearchTree {
        let fsm = product.fsm;
        let mut tree = SearchTree::empty();
        let mut at_v: Vec<Vec<u32>> = vec![Vec::new(); fsm.node_count()];
        for &r in roots {
            let before = tree.nodes.len();
            let id = tree.insert(r, 0, 0.0);
            if id as usize == before {
                at_v[r.v.index()].push(id);
            }
        }
        let max_layer = config.b.saturating_add(config.c);
        for &v in fsm.order() {
            if v == fsm.vt() {
                continue;
            }
            if product.subgoal_of(v).is_some() {
                let mut spent = 0usize;
                'layers: for layer in 0..max_layer {
                    let mut batch: Vec<u32> = at_v[v.index()]
                        .iter()
                        .copied()
                        .filter(|&n| {
                            let node = &tree.nodes[n as usize];
                            node.layer == layer && !node.expanded
                        })
                        .collect();
                    if batch.is_empty() {
                        if at_v[v.index()]
                            .iter()
                            .all(|&n| tree.nodes[n as usize].expanded || tree.nodes[n as usize].layer < layer)
                        {
                            break;
                        }
                        continue;
                    }
                    if layer >= config.b {
                        if let Some(k) = config.k {
                            batch.sort_by(|&a, &b| {
                                tree.nodes[a as usize]
                                    .g
                                    .total_cmp(&tree.nodes[b as usize].g)
                                    .then(a.cmp(&b))
                            });
                            batch.truncate(k);
                        }
                    }
                    for n in batch {
                        if config.node_budget.is_some_and(|budget| spent >= budget) {
                            break 'layers;
                        }
                        spent += 1;
                        tree.nodes[n as usize].expanded = true;
                        let (x, g) = (tree.nodes[n as usize].x, tree.nodes[n as usize].g);
                        for &a in Action::ALL {
                            let child = AugmentedState {
                                s: product.world.transition(&x.s, a),
                                v,
                            };
                            let before = tree.nodes.len();
                            let id = tree.insert(child, layer + 1, g + STEP_COST);
                            if id as usize == before {
                                at_v[v.index()].push(id);
                            }
                            tree.add_edge(n, id, AugmentedAction::Primitive(a));
                        }
                    }
                }
            }
            let here: Vec<u32> = at_v[v.index()].clone();
            for n in here {
                let (x, g, layer) = {
                    let node = &tree.nodes[n as usize];
                    (node.x, node.g, node.layer)
                };
                for &to in fsm.successors(v) {
                    let cost = product.transition_cost(&x.s, v, to);
                    let child = AugmentedState { s: x.s, v: to };
                    let before = tree.nodes.len();
                    let id = tree.insert(child, layer, g + cost);
                    if id as usize == before {
                        at_v[to.index()].push(id);
                    }
                    tree.add_edge(n, id, AugmentedAction::Transition(v, to));
                }
            }
        }
        tree.value_iteration(product);
        tree
    }

    fn edge_cost<C: Classifier + ?Sized>(&self, product: &Product<'_, C>, e: &TreeEdge) -> f64 {
        let x = &self.nodes[e.from as usize].x;
        product.cost(x, e.action)
    }

    /// Minimum cost-to-go of every node under `product`'s classifier
    /// (Dijkstra backwards from the terminal nodes).
    pub fn value_iteration<C: Classifier + ?Sized>(&mut self, product: &Product<'_, C>) {
        let n = self.nodes.len();
        self.cost = self.edges.iter().map(|e| self.edge_cost(product, e)).collect();
        let mut incoming: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (i, e) in self.edges.iter().enumerate() {
            incoming[e.to as usize].push(i as u32);
        }
        let mut value = vec![f64::INFINITY; n];
        let mut best = vec![None; n];
        let mut done = vec![false; n];
        let mut order = Vec::new();
        let mut heap = BinaryHeap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if product.is_terminal(&node.x) {
                value[i] = 0.0;
                heap.push(MinKey(0.0, i as u32));
            }
        }
        while let Some(MinKey(v, node)) = heap.pop() {
            if done[node as usize] || v > value[node as usize] {
                continue;
            }
            done[node as usize] = true;
            order.push(node);
            for &e in &incoming[node as usize] {
                let from = self.edges[e as usize].from as usize;
                if done[from] {
                    continue;
                }
                let cand = self.cost[e as usize] + v;
                if cand < value[from] {
                    value[from] = cand;
                    best[from] = Some(e);
                    heap.push(MinKey(cand, from as u32));
                }
            }
        }
        for (v, b) in value.iter_mut().zip(best.iter_mut()) {
            if !v.is_finite() || *v >= SENTINEL_J {
                *v = SENTINEL_J;
                *b = None;
            }
        }
        self.value = value;
        self.best = best;
        self.order = order.into_iter().filter(|&i| self.value[i as usize] < SENTINEL_J).collect();
    }

    /// Edge costs and node values under `product`, following the argmin
    /// edges chosen by the last value iteration instead of re-minimizing.
    pub fn frozen_values<C: Classifier + ?Sized>(&self, product: &Product<'_, C>) -> (Vec<f64>, Vec<f64>) {
        let cost: Vec<f64> = self.edges.iter().map(|e| self.edge_cost(product, e)).collect();
        let mut value = vec![SENTINEL_J; self.nodes.len()];
        for &n in &self.order {
            value[n as usize] = match self.best[n as usize] {
                None => 0.0,
                Some(e) => cost[e as usize] + value[self.edges[e as usize].to as usize],
            };
        }
        (cost, value)
    }

    /// Cost-to-go of every applicable action at node `n`, given edge costs
    /// and node values.
    pub fn action_values<C: Classifier + ?Sized>(
        &self,
        product: &Product<'_, C>,
        n: u32,
        cost: &[f64],
        value: &[f64],
    ) -> Vec<ActionValue> {
        let x = self.nodes[n as usize].x;
        product
            .actions(&x)
            .into_iter()
            .map(|action| {
                let edge = self.out[n as usize]
                    .iter()
                    .copied()
                    .find(|&e| self.edges[e as usize].action == action);
                let j = match edge {
                    Some(e) if value[self.edges[e as usize].to as usize] < SENTINEL_J => {
                        (cost[e as usize] + value[self.edges[e as usize].to as usize]).min(SENTINEL_J)
                    }
                    _ => SENTINEL_J,
                };
                ActionValue {
                    action,
                    edge: edge.filter(|_| j < SENTINEL_J),
                    j,
                }
            })
            .collect()
    }
}

/// `Rat(x, a)`: softmax of `-α J` over the actions applicable at `x`.
/// `None` if `x` is not in the tree or `a` is not applicable there.
pub fn rationality<C: Classifier + ?Sized>(
    tree: &SearchTree,
    product: &Product<'_, C>,
    x: &AugmentedState,
    a: AugmentedAction,
    alpha: f64,
) -> Option<f64> {
    let n = tree.node_of(x)?;
    let values = tree.action_values(product, n, &tree.cost, &tree.value);
    let probs = softmax_neg(&values.iter().map(|v| v.j).collect::<Vec<_>>(), alpha);
    values.iter().position(|v| v.action == a).map(|i| probs[i])
}

/// `softmax(-α j)`.
pub fn softmax_neg(j: &[f64], alpha: f64) -> Vec<f64> {
    let lo = j.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = j.iter().map(|&v| (-alpha * (v - lo)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// `ln softmax(-α j)[i]`.
pub fn log_softmax_neg(j: &[f64], alpha: f64, i: usize) -> f64 {
    let lo = j.iter().copied().fold(f64::INFINITY, f64::min);
    let z: f64 = j.iter().map(|&v| (-alpha * (v - lo)).exp()).sum();
    -alpha * (j[i] - lo) - z.ln()
}

#[derive(PartialEq)]
struct MinKey(f64, u32);

impl Eq for MinKey {}

impl PartialOrd for MinKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MinKey {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Rules, WorldConfig};
    use crate::fsm::compile;
    use crate::model::{Oracle, Theta};
    use crate::tl::parse_task;

    fn world(rows: &[&str]) -> (WorldConfig, AugmentedState) {
        let (w, agent) = WorldConfig::from_ascii(rows, 6, Rules::default()).unwrap();
        let s = w.initial_state(agent.unwrap(), &[]);
        (w, AugmentedState { s, v: crate::fsm::FsmNodeId(1) })
    }

    #[test]
    fn one_bfs_layer_has_all_children() {
        let (w, root) = world(&["...", ".@.", "..."]);
        let fsm = compile(&parse_task("grab-axe").unwrap());
        let theta = Theta::for_world(&w);
        let p = Product::new(&w, &fsm, &theta, 1.0).unwrap();
        let config = PlannerConfig { b: 1, c: 0, ..PlannerConfig::train() };
        let tree = SearchTree::build(&p, &config, &[root]);
        let prim = tree
            .out_edges(0)
            .iter()
            .filter(|&&e| matches!(tree.edges[e as usize].action, AugmentedAction::Primitive(_)))
            .count();
        assert_eq!(prim, 5);
        // root, four moved states, then terminal copies of each
        assert_eq!(tree.nodes.iter().filter(|n| n.x.v == root.v).count(), 5);
    }

    #[test]
    fn chain_to_goal_has_expected_cost_to_go() {
        let (w, root) = world(&["@..a"]);
        let fsm = compile(&parse_task("grab-axe").unwrap());
        let p = Product::new(&w, &fsm, &Oracle, 1.0).unwrap();
        let tree = SearchTree::build(&p, &PlannerConfig { b: 6, ..PlannerConfig::train() }, &[root]);
        let n = tree.node_of(&root).unwrap();
        assert!((tree.value[n as usize] - 0.4).abs() < 1e-12);
        let vals = tree.action_values(&p, n, &tree.cost, &tree.value);
        let right = vals
            .iter()
            .find(|v| v.action == AugmentedAction::Primitive(Action::Right))
            .unwrap();
        assert!((right.j - 0.4).abs() < 1e-12);
        let left = vals
            .iter()
            .find(|v| v.action == AugmentedAction::Primitive(Action::Left))
            .unwrap();
        assert!((left.j - 0.5).abs() < 1e-12);
        let (cost, value) = tree.frozen_values(&p);
        assert_eq!(cost, tree.cost);
        assert_eq!(value, tree.value);
    }

    #[test]
    fn rationality_sums_to_one() {
        let (w, root) = world(&["@.a", "T.W"]);
        let fsm = compile(&parse_task("grab-axe then mine-wood").unwrap());
        let theta = Theta::for_world(&w);
        let p = Product::new(&w, &fsm, &theta, 1.0).unwrap();
        let tree = SearchTree::build(&p, &PlannerConfig::train(), &[root]);
        let total: f64 = p
            .actions(&root)
            .into_iter()
            .map(|a| rationality(&tree, &p, &root, a, 1.0).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((softmax_neg(&[0.0, 1.0], 1.0)[0] - 0.7310585786300049).abs() < 1e-15);
    }
}
