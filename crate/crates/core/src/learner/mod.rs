//! Scoring demonstrations against tasks and learning classifier weights.
//!
//! The score of a demonstration under a task is the best alignment of its
//! states to FSM nodes: log-rationality of every observed action in its
//! node, plus `ln G_v(s) + ln I_v'(s)` at every FSM transition.

mod train;

pub use train::{sample_negatives, train, EpochLog, TrainConfig, TrainError, TrainOutcome};

pub use crate::demo::Demonstration;

use crate::env::{features, GridState, WorldConfig};
use crate::fsm::{compile, Fsm, FsmNodeId};
use crate::model::{Classifier, Theta, Which, ROW};
use crate::planner::{softmax_neg, AugmentedAction, AugmentedState, PlanError, PlannerConfig, Product, SearchTree};
use crate::tl::TaskAst;

/// FSM node per trajectory step plus the transitions taken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    /// Node in which the action at step `i` is taken; the last entry is the
    /// node left for `vT` at the final state.
    pub nodes: Vec<FsmNodeId>,
    /// `(step, from, to)` for every FSM transition, in order.
    pub transitions: Vec<(usize, FsmNodeId, FsmNodeId)>,
}

/// Per-step terms the alignment search maximizes over.
pub struct ScoreTables {
    pub n: usize,
    /// `stay[i][v]`: `ln Rat((s_i, v), a_i)` for `i < n - 1`.
    pub stay: Vec<Vec<f64>>,
    /// `trans[i][e]`: transition term of FSM edge `e` at state `s_i`.
    pub trans: Vec<Vec<f64>>,
}

impl ScoreTables {
    pub fn compute<C: Classifier + ?Sized>(
        demo: &Demonstration,
        product: &Product<'_, C>,
        tree: &SearchTree,
        alpha: f64,
        values: Option<(&[f64], &[f64])>,
    ) -> ScoreTables {
        let fsm = product.fsm;
        let n = demo.states.len();
        let (cost, value) = values.unwrap_or((&tree.cost, &tree.value));
        let mut stay = vec![vec![f64::NEG_INFINITY; fsm.node_count()]; n.saturating_sub(1)];
        for (i, row) in stay.iter_mut().enumerate() {
            for v in fsm.nodes() {
                if product.subgoal_of(v).is_none() {
                    continue;
                }
                let x = AugmentedState { s: demo.states[i], v };
                let node = tree.node_of(&x).expect("demo states are tree roots");
                let vals = tree.action_values(product, node, cost, value);
                let js: Vec<f64> = vals.iter().map(|a| a.j).collect();
                let k = vals
                    .iter()
                    .position(|a| a.action == AugmentedAction::Primitive(demo.actions[i]))
                    .expect("primitive actions are always applicable");
                row[v.index()] = crate::planner::log_softmax_neg(&js, alpha, k);
            }
        }
        let trans = demo
            .states
            .iter()
            .map(|s| {
                fsm.edges()
                    .iter()
                    .map(|&(a, b)| product.transition_log_terms(s, a, b))
                    .collect()
            })
            .collect();
        ScoreTables { n, stay, trans }
    }
}

/// Best alignment by dynamic programming over (step, FSM node), nodes in
/// reverse topological order. FSM transitions consume no step.
pub fn align(fsm: &Fsm, tables: &ScoreTables) -> (f64, Alignment) {
    let n = tables.n;
    let nv = fsm.node_count();
    let vt = fsm.vt();
    let edge_index = |a: FsmNodeId, b: FsmNodeId| fsm.edges().iter().position(|&e| e == (a, b)).unwrap();
    // f[i][v], with the choice made: None = stay, Some(k) = go to k.
    let mut f = vec![vec![f64::NEG_INFINITY; nv]; n];
    let mut choice: Vec<Vec<Option<FsmNodeId>>> = vec![vec![None; nv]; n];
    for i in (0..n).rev() {
        for &v in fsm.order().iter().rev() {
            if v == vt {
                f[i][v.index()] = if i == n - 1 { 0.0 } else { f64::NEG_INFINITY };
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            let mut pick = None;
            if v != fsm.v0() && i + 1 < n {
                best = tables.stay[i][v.index()] + f[i + 1][v.index()];
            }
            for &k in fsm.successors(v) {
                let cand = tables.trans[i][edge_index(v, k)] + f[i][k.index()];
                if cand > best {
                    best = cand;
                    pick = Some(k);
                }
            }
            f[i][v.index()] = best;
            choice[i][v.index()] = pick;
        }
    }
    let mut alignment = Alignment {
        nodes: Vec::with_capacity(n),
        transitions: Vec::new(),
    };
    let total = f[0][fsm.v0().index()];
    if total == f64::NEG_INFINITY {
        return (total, alignment);
    }
    let (mut i, mut v) = (0, fsm.v0());
    while v != vt {
        match choice[i][v.index()] {
            Some(k) => {
                alignment.transitions.push((i, v, k));
                if k == vt {
                    alignment.nodes.push(v);
                }
                v = k;
            }
            None => {
                alignment.nodes.push(v);
                i += 1;
            }
        }
    }
    (total, alignment)
}

/// A demonstration scored against one task, with the search tree and
/// alignment kept for differentiation.
pub struct ScoredTask {
    pub task: TaskAst,
    pub fsm: Fsm,
    pub tree: SearchTree,
    pub score: f64,
    pub alignment: Alignment,
}

/// Search tree rooted at every (demo state, labeled node) pair.
pub fn demo_tree<C: Classifier + ?Sized>(
    demo: &Demonstration,
    product: &Product<'_, C>,
    planner: &PlannerConfig,
) -> SearchTree {
    let fsm = product.fsm;
    let roots: Vec<AugmentedState> = demo
        .states
        .iter()
        .flat_map(|&s| {
            fsm.nodes()
                .filter(|&v| product.subgoal_of(v).is_some())
                .map(move |v| AugmentedState { s, v })
        })
        .collect();
    SearchTree::build(product, planner, &roots)
}

/// Alignment score of `demo` under `task`.
pub fn score_task(
    demo: &Demonstration,
    task: &TaskAst,
    theta: &Theta,
    config: &TrainConfig,
) -> Result<ScoredTask, PlanError> {
    let fsm = compile(task);
    let product = Product::new(&demo.world, &fsm, theta, config.lambda)?;
    let tree = demo_tree(demo, &product, &config.planner);
    let tables = ScoreTables::compute(demo, &product, &tree, config.alpha, None);
    let (score, alignment) = align(&fsm, &tables);
    drop(product);
    Ok(ScoredTask {
        task: task.clone(),
        fsm,
        tree,
        score,
        alignment,
    })
}

/// Score and best alignment of `demo` for an already compiled FSM.
pub fn score(demo: &Demonstration, fsm: &Fsm, theta: &Theta, config: &TrainConfig) -> Result<(f64, Alignment), PlanError> {
    let product = Product::new(&demo.world, fsm, theta, config.lambda)?;
    let tree = demo_tree(demo, &product, &config.planner);
    let tables = ScoreTables::compute(demo, &product, &tree, config.alpha, None);
    Ok(align(fsm, &tables))
}

pub fn segment(demo: &Demonstration, fsm: &Fsm, theta: &Theta, config: &TrainConfig) -> Result<Alignment, PlanError> {
    score(demo, fsm, theta, config).map(|(_, a)| a)
}

/// Accumulates `coeff * d ln σ(logit) / dθ` into a flat gradient.
struct GradAcc<'a> {
    theta: &'a Theta,
    world: &'a WorldConfig,
    grad: Vec<f64>,
}

impl GradAcc<'_> {
    fn add(&mut self, which: Which, subgoal: usize, s: &GridState, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        let phi = features(s, self.world);
        let scale = coeff * (1.0 - self.theta.eval(which, subgoal, phi));
        let off = self.theta.offset(which, subgoal);
        for j in phi.active() {
            self.grad[off + j] += scale;
        }
        self.grad[off + ROW - 1] += scale;
    }

    /// `coeff * d(ln G_from(s) + ln I_to(s))`.
    fn add_transition<C: Classifier + ?Sized>(
        &mut self,
        product: &Product<'_, C>,
        s: &GridState,
        from: FsmNodeId,
        to: FsmNodeId,
        coeff: f64,
    ) {
        if let Some(o) = product.subgoal_of(from) {
            self.add(Which::G, o, s, coeff);
        }
        if let Some(o) = product.subgoal_of(to) {
            self.add(Which::I, o, s, coeff);
        }
    }
}

impl ScoredTask {
    /// Gradient of the score with the tree, its argmin edges and the
    /// alignment held fixed.
    pub fn gradient(&self, demo: &Demonstration, theta: &Theta, config: &TrainConfig) -> Vec<f64> {
        let product = Product::new(&demo.world, &self.fsm, theta, config.lambda).expect("scored before");
        let tree = &self.tree;
        let mut acc = GradAcc {
            theta,
            world: &demo.world,
            grad: vec![0.0; theta.param_count()],
        };
        if self.score == f64::NEG_INFINITY {
            return acc.grad;
        }
        let mut node_adj = vec![0.0; tree.nodes.len()];
        let mut edge_adj = vec![0.0; tree.edges.len()];
        for (i, &v) in self.alignment.nodes.iter().enumerate().take(demo.actions.len()) {
            let x = AugmentedState { s: demo.states[i], v };
            let n = tree.node_of(&x).unwrap();
            let vals = tree.action_values(&product, n, &tree.cost, &tree.value);
            let probs = softmax_neg(&vals.iter().map(|a| a.j).collect::<Vec<_>>(), config.alpha);
            let taken = AugmentedAction::Primitive(demo.actions[i]);
            for (val, p) in vals.iter().zip(&probs) {
                let Some(e) = val.edge else { continue };
                let delta = if val.action == taken { 1.0 } else { 0.0 };
                let c = config.alpha * (p - delta);
                edge_adj[e as usize] += c;
                node_adj[tree.edges[e as usize].to as usize] += c;
            }
        }
        for &n in tree.order.iter().rev() {
            let adj = node_adj[n as usize];
            if adj == 0.0 {
                continue;
            }
            if let Some(e) = tree.best[n as usize] {
                edge_adj[e as usize] += adj;
                node_adj[tree.edges[e as usize].to as usize] += adj;
            }
        }
        for (e, &adj) in tree.edges.iter().zip(&edge_adj) {
            if adj == 0.0 {
                continue;
            }
            if let AugmentedAction::Transition(from, to) = e.action {
                let s = tree.nodes[e.from as usize].x.s;
                acc.add_transition(&product, &s, from, to, -config.lambda * adj);
            }
        }
        for &(i, from, to) in &self.alignment.transitions {
            acc.add_transition(&product, &demo.states[i], from, to, 1.0);
        }
        acc.grad
    }

    /// The score under `theta` with tree structure, argmin edges and
    /// alignment frozen. Equals `self.score` at the scoring parameters.
    pub fn frozen_score(&self, demo: &Demonstration, theta: &Theta, config: &TrainConfig) -> f64 {
        if self.score == f64::NEG_INFINITY {
            return self.score;
        }
        let product = Product::new(&demo.world, &self.fsm, theta, config.lambda).expect("scored before");
        let (cost, value) = self.tree.frozen_values(&product);
        let mut total = 0.0;
        for (i, &v) in self.alignment.nodes.iter().enumerate().take(demo.actions.len()) {
            let x = AugmentedState { s: demo.states[i], v };
            let n = self.tree.node_of(&x).unwrap();
            let vals = self.tree.action_values(&product, n, &cost, &value);
            let js: Vec<f64> = vals.iter().map(|a| a.j).collect();
            let k = vals
                .iter()
                .position(|a| a.action == AugmentedAction::Primitive(demo.actions[i]))
                .unwrap();
            total += crate::planner::log_softmax_neg(&js, config.alpha, k);
        }
        for &(i, from, to) in &self.alignment.transitions {
            total += product.transition_log_terms(&demo.states[i], from, to);
        }
        total
    }
}

/// One demonstration with its true task and negatives, all scored.
pub struct ScoredSample {
    pub truth: ScoredTask,
    pub negatives: Vec<ScoredTask>,
}

impl ScoredSample {
    pub fn new(
        demo: &Demonstration,
        negatives: &[TaskAst],
        theta: &Theta,
        config: &TrainConfig,
    ) -> Result<Self, PlanError> {
        Ok(ScoredSample {
            truth: score_task(demo, &demo.task, theta, config)?,
            negatives: negatives
                .iter()
                .map(|t| score_task(demo, t, theta, config))
                .collect::<Result<_, _>>()?,
        })
    }

    /// Objective `score + γ ln softmax_β(score; negatives)`, to be maximized.
    pub fn objective(&self, config: &TrainConfig) -> f64 {
        let scores = self.scores();
        objective_from(&scores, config)
    }

    pub fn scores(&self) -> Vec<f64> {
        std::iter::once(self.truth.score)
            .chain(self.negatives.iter().map(|t| t.score))
            .collect()
    }

    /// True task strictly above every negative.
    pub fn ranked_first(&self) -> bool {
        self.negatives.iter().all(|n| self.truth.score > n.score)
    }

    pub fn gradient(&self, demo: &Demonstration, theta: &Theta, config: &TrainConfig) -> Vec<f64> {
        let scores = self.scores();
        let weights = objective_weights(&scores, config);
        let mut grad = vec![0.0; theta.param_count()];
        let tasks = std::iter::once(&self.truth).chain(&self.negatives);
        for (task, w) in tasks.zip(weights) {
            if w == 0.0 {
                continue;
            }
            for (g, d) in grad.iter_mut().zip(task.gradient(demo, theta, config)) {
                *g += w * d;
            }
        }
        grad
    }

    pub fn frozen_objective(&self, demo: &Demonstration, theta: &Theta, config: &TrainConfig) -> f64 {
        let scores: Vec<f64> = std::iter::once(&self.truth)
            .chain(&self.negatives)
            .map(|t| t.frozen_score(demo, theta, config))
            .collect();
        objective_from(&scores, config)
    }
}

fn objective_from(scores: &[f64], config: &TrainConfig) -> f64 {
    let logits: Vec<f64> = scores.iter().map(|s| config.beta * s).collect();
    scores[0] + config.gamma * (logits[0] - log_sum_exp(&logits))
}

/// d objective / d score_k for each scored task (truth first).
fn objective_weights(scores: &[f64], config: &TrainConfig) -> Vec<f64> {
    let logits: Vec<f64> = scores.iter().map(|s| config.beta * s).collect();
    let lse = log_sum_exp(&logits);
    let p: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    p.iter()
        .enumerate()
        .map(|(k, &pk)| {
            let own = if k == 0 { 1.0 } else { 0.0 };
            own + config.gamma * config.beta * (own - pk)
        })
        .collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + xs.iter().map(|x| (x - hi).exp()).sum::<f64>().ln()
}

/// Negative objective summed over a batch, and its gradient.
pub fn loss(
    batch: &[Demonstration],
    theta: &Theta,
    negatives: &[Vec<TaskAst>],
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>), PlanError> {
    let mut total = 0.0;
    let mut grad = vec![0.0; theta.param_count()];
    for (demo, negs) in batch.iter().zip(negatives) {
        let sample = ScoredSample::new(demo, negs, theta, config)?;
        total -= sample.objective(config);
        for (g, d) in grad.iter_mut().zip(sample.gradient(demo, theta, config)) {
            *g -= d;
        }
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Rules;
    use crate::tl::parse_task;
    use crate::world::WorldSpec;

    fn demo(task: &str, seed: u64) -> Demonstration {
        let t = parse_task(task).unwrap();
        crate::demo::generate_demo(&WorldSpec::standard(), &t, seed, 0.0).unwrap()
    }

    #[test]
    fn single_node_alignment_stays_put() {
        let d = demo("grab-axe", 1);
        let theta = Theta::zeros(Rules::default().subgoal_names());
        let fsm = compile(&d.task);
        let (s, a) = score(&d, &fsm, &theta, &TrainConfig::default()).unwrap();
        assert!(s.is_finite());
        assert!(a.nodes.iter().all(|&v| v == FsmNodeId(1)));
        assert_eq!(a.nodes.len(), d.states.len());
        assert_eq!(a.transitions.first().unwrap(), &(0, FsmNodeId(0), FsmNodeId(1)));
        assert_eq!(a.transitions.last().unwrap().2, fsm.vt());
    }

    #[test]
    fn identical_negative_halves_the_softmax() {
        let config = TrainConfig {
            gamma: 0.1,
            ..TrainConfig::default()
        };
        let v = objective_from(&[-3.0, -3.0], &config);
        assert!((v - (-3.0 + 0.1 * 0.5f64.ln())).abs() < 1e-12);
        let w = objective_weights(&[-3.0, -3.0], &TrainConfig { gamma: 0.0, ..config });
        assert_eq!(w, vec![1.0, 0.0]);
    }

    #[test]
    fn frozen_score_matches_score() {
        let d = demo("grab-axe then mine-wood", 2);
        let theta = Theta::zeros(Rules::default().subgoal_names());
        let config = TrainConfig::default();
        let st = score_task(&d, &d.task, &theta, &config).unwrap();
        assert!((st.frozen_score(&d, &theta, &config) - st.score).abs() < 1e-9);
    }
}
