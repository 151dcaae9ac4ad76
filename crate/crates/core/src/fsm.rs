//! Compile task ASTs into finite state machines over subgoal nodes.
//!
//! Node 0 is always the super start node `v0`, the last node is the super
//! terminal node `vT`. Every other node carries a subgoal label.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::tl::{SubgoalName, TaskAst};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FsmNodeId(pub u16);

impl FsmNodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FsmError {
    #[error("cycle detected in FSM")]
    Cycle,
    #[error("FSM too large ({0} nodes)")]
    TooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fsm {
    labels: Vec<Option<SubgoalName>>,
    edges: Vec<(FsmNodeId, FsmNodeId)>,
    succ: Vec<Vec<FsmNodeId>>,
    pred: Vec<Vec<FsmNodeId>>,
    start_set: Vec<FsmNodeId>,
    terminal_set: Vec<FsmNodeId>,
    order: Vec<FsmNodeId>,
}

impl Fsm {
    pub fn v0(&self) -> FsmNodeId {
        FsmNodeId(0)
    }

    pub fn vt(&self) -> FsmNodeId {
        FsmNodeId((self.labels.len() - 1) as u16)
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.len() - 2
    }

    pub fn nodes(&self) -> impl Iterator<Item = FsmNodeId> {
        (0..self.labels.len() as u16).map(FsmNodeId)
    }

    pub fn label(&self, v: FsmNodeId) -> Option<&SubgoalName> {
        self.labels[v.index()].as_ref()
    }

    pub fn edges(&self) -> &[(FsmNodeId, FsmNodeId)] {
        &self.edges
    }

    pub fn successors(&self, v: FsmNodeId) -> &[FsmNodeId] {
        &self.succ[v.index()]
    }

    pub fn predecessors(&self, v: FsmNodeId) -> &[FsmNodeId] {
        &self.pred[v.index()]
    }

    pub fn has_edge(&self, from: FsmNodeId, to: FsmNodeId) -> bool {
        self.succ[from.index()].contains(&to)
    }

    /// Start set VI (before the super nodes were attached).
    pub fn start_set(&self) -> &[FsmNodeId] {
        &self.start_set
    }

    /// Terminal set VG (before the super nodes were attached).
    pub fn terminal_set(&self) -> &[FsmNodeId] {
        &self.terminal_set
    }

    /// Cached topological order, `v0` first and `vT` last.
    pub fn order(&self) -> &[FsmNodeId] {
        &self.order
    }

    /// Plain-text edge list, one `from -> to` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for &(a, b) in &self.edges {
            let _ = writeln!(out, "{} -> {}", self.node_name(a), self.node_name(b));
        }
        out
    }

    pub fn node_name(&self, v: FsmNodeId) -> String {
        if v == self.v0() {
            "v0".into()
        } else if v == self.vt() {
            "vT".into()
        } else {
            format!("n{}[{}]", v.0, self.labels[v.index()].as_ref().unwrap())
        }
    }
}

struct Fragment {
    starts: Vec<u16>,
    terminals: Vec<u16>,
}

#[derive(Default)]
struct Builder {
    labels: Vec<Option<SubgoalName>>,
    edges: Vec<(u16, u16)>,
}

impl Builder {
    fn node(&mut self, label: Option<SubgoalName>) -> u16 {
        self.labels.push(label);
        (self.labels.len() - 1) as u16
    }

    fn connect(&mut self, from: &[u16], to: &[u16]) {
        for &a in from {
            for &b in to {
                self.edges.push((a, b));
            }
        }
    }

    fn fragment(&mut self, ast: &TaskAst) -> Fragment {
        match ast {
            TaskAst::Atom(name) => {
                let id = self.node(Some(name.clone()));
                Fragment {
                    starts: vec![id],
                    terminals: vec![id],
                }
            }
            TaskAst::Then(children) => {
                let mut parts = children.iter().map(|c| self.fragment(c)).collect::<Vec<_>>();
                for w in 0..parts.len() - 1 {
                    let (left, right) = parts.split_at(w + 1);
                    self.connect(&left[w].terminals, &right[0].starts);
                }
                let last = parts.pop().unwrap();
                Fragment {
                    starts: parts.swap_remove(0).starts,
                    terminals: last.terminals,
                }
            }
            TaskAst::Or(children) => {
                let mut out = Fragment {
                    starts: vec![],
                    terminals: vec![],
                };
                for c in children {
                    let f = self.fragment(c);
                    out.starts.extend(f.starts);
                    out.terminals.extend(f.terminals);
                }
                out
            }
            TaskAst::And(children) => self.and_fragment(children),
        }
    }

    /// Layer `i` holds a copy of child `s` for every set `D` of `i` other
    /// children already done; `(s, D)` feeds `(s', D + s)` in layer `i + 1`.
    fn and_fragment(&mut self, children: &[TaskAst]) -> Fragment {
        let n = children.len();
        let mut layers: Vec<Vec<(usize, u32, Fragment)>> = Vec::with_capacity(n);
        for layer in 0..n {
            let mut copies = Vec::new();
            for s in 0..n {
                for done in 0u32..(1 << n) {
                    if done & (1 << s) != 0 || done.count_ones() as usize != layer {
                        continue;
                    }
                    let f = self.fragment(&children[s]);
                    copies.push((s, done, f));
                }
            }
            layers.push(copies);
        }
        for layer in 0..n - 1 {
            let (lo, hi) = layers.split_at(layer + 1);
            for (s, done, from) in &lo[layer] {
                let reached = done | (1 << s);
                for (_, next_done, to) in &hi[0] {
                    if *next_done == reached {
                        self.edges.extend(
                            from.terminals
                                .iter()
                                .flat_map(|&a| to.starts.iter().map(move |&b| (a, b))),
                        );
                    }
                }
            }
        }
        Fragment {
            starts: layers[0].iter().flat_map(|c| c.2.starts.iter().copied()).collect(),
            terminals: layers[n - 1]
                .iter()
                .flat_map(|c| c.2.terminals.iter().copied())
                .collect(),
        }
    }
}

/// Compile a task into an FSM with super nodes `v0` and `vT` attached.
pub fn compile(ast: &TaskAst) -> Fsm {
    try_compile(ast).expect("compiled FSMs are acyclic and small")
}

pub fn try_compile(ast: &TaskAst) -> Result<Fsm, FsmError> {
    let mut b = Builder::default();
    let v0 = b.node(None);
    let frag = b.fragment(ast);
    let vt = b.node(None);
    if b.labels.len() > u16::MAX as usize {
        return Err(FsmError::TooLarge(b.labels.len()));
    }
    b.connect(&[v0], &frag.starts);
    b.connect(&frag.terminals, &[vt]);
    let n = b.labels.len();
    b.edges.sort_unstable();
    let edges: Vec<(FsmNodeId, FsmNodeId)> = b
        .edges
        .iter()
        .map(|&(a, c)| (FsmNodeId(a), FsmNodeId(c)))
        .collect();
    let mut succ = vec![Vec::new(); n];
    let mut pred = vec![Vec::new(); n];
    for &(a, c) in &edges {
        succ[a.index()].push(c);
        pred[c.index()].push(a);
    }
    let mut fsm = Fsm {
        labels: b.labels,
        edges,
        succ,
        pred,
        start_set: frag.starts.into_iter().map(FsmNodeId).collect(),
        terminal_set: frag.terminals.into_iter().map(FsmNodeId).collect(),
        order: Vec::new(),
    };
    fsm.order = topological_order(&fsm)?;
    Ok(fsm)
}

/// Kahn's algorithm, smallest ready id first.
pub fn topological_order(fsm: &Fsm) -> Result<Vec<FsmNodeId>, FsmError> {
    let n = fsm.node_count();
    let mut indegree: Vec<usize> = (0..n).map(|i| fsm.pred[i].len()).collect();
    let mut ready: BinaryHeap<Reverse<FsmNodeId>> = fsm
        .nodes()
        .filter(|v| indegree[v.index()] == 0)
        .map(Reverse)
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &w in &fsm.succ[v.index()] {
            indegree[w.index()] -= 1;
            if indegree[w.index()] == 0 {
                ready.push(Reverse(w));
            }
        }
    }
    if order.len() != n {
        return Err(FsmError::Cycle);
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tl::parse_task;

    fn fsm(s: &str) -> Fsm {
        compile(&parse_task(s).unwrap())
    }

    #[test]
    fn then_chain() {
        let f = fsm("a then b");
        assert_eq!(f.to_edge_list(), "v0 -> n1[a]\nn1[a] -> n2[b]\nn2[b] -> vT\n");
        assert_eq!(f.order(), &[FsmNodeId(0), FsmNodeId(1), FsmNodeId(2), FsmNodeId(3)]);
    }

    #[test]
    fn or_then_product() {
        let f = fsm("(a or b) then c");
        assert_eq!(f.start_set().len(), 2);
        assert_eq!(f.terminal_set(), &[FsmNodeId(3)]);
        assert!(f.has_edge(FsmNodeId(1), FsmNodeId(3)));
        assert!(f.has_edge(FsmNodeId(2), FsmNodeId(3)));
    }

    #[test]
    fn and_layers() {
        let f = fsm("a and b");
        assert_eq!(f.labeled_count(), 4);
        // layer 0: (a,{}) = n1, (b,{}) = n2; layer 1: (a,{b}) = n3, (b,{a}) = n4
        assert!(f.has_edge(FsmNodeId(1), FsmNodeId(4)));
        assert!(f.has_edge(FsmNodeId(2), FsmNodeId(3)));
        assert_eq!(f.edges().len(), 2 + 2 + 2);
        assert_eq!(fsm("a and b and c").labeled_count(), 12);
    }

    #[test]
    fn cycle_is_reported() {
        let mut f = fsm("a then b");
        f.succ[2].push(FsmNodeId(1));
        f.pred[1].push(FsmNodeId(2));
        assert_eq!(topological_order(&f), Err(FsmError::Cycle));
    }
}
