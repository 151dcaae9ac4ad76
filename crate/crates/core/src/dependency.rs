//! Subgoal precedence discovery and goal-only planning.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demo::Demonstration;
use crate::env::{features, GridState, WorldConfig};
use crate::fsm::compile;
use crate::model::{Classifier, Theta, Which};
use crate::planner::{plan, Plan, PlannerConfig, PopRule, Product, StopRule};
use crate::tl::{SubgoalName, TaskAst};

pub const LENGTH_BIAS: f64 = 0.9;
pub const LENGTH_LIMIT: usize = 6;
pub const NODE_CAP: usize = 25_000;
/// Expanded nodes allowed to one guided attempt.
pub const ATTEMPT_BUDGET: usize = 1000;

/// Per-subgoal extremes of `G` over training states and the geometric-mean
/// threshold between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierThresholds {
    pub min_g: Vec<f64>,
    pub max_g: Vec<f64>,
    pub threshold: Vec<f64>,
}

impl ClassifierThresholds {
    pub fn from_extremes(min_g: Vec<f64>, max_g: Vec<f64>) -> Self {
        let threshold = min_g.iter().zip(&max_g).map(|(lo, hi)| (lo * hi).sqrt()).collect();
        ClassifierThresholds { min_g, max_g, threshold }
    }

    pub fn holds(&self, theta: &Theta, subgoal: usize, s: &GridState, world: &WorldConfig) -> bool {
        theta.eval(Which::G, subgoal, features(s, world)) >= self.threshold[subgoal]
    }
}

/// Evaluate every goal classifier on every state of the dataset.
pub fn compute_thresholds(dataset: &[Demonstration], theta: &Theta) -> ClassifierThresholds {
    let n = theta.subgoals().len();
    let (lo, hi) = dataset
        .par_iter()
        .map(|demo| {
            let mut lo = vec![f64::INFINITY; n];
            let mut hi = vec![f64::NEG_INFINITY; n];
            for s in &demo.states {
                let phi = features(s, &demo.world);
                for o in 0..n {
                    let g = theta.eval(Which::G, o, phi);
                    lo[o] = lo[o].min(g);
                    hi[o] = hi[o].max(g);
                }
            }
            (lo, hi)
        })
        .reduce(
            || (vec![f64::INFINITY; n], vec![f64::NEG_INFINITY; n]),
            |(mut a, mut b), (c, d)| {
                for o in 0..n {
                    a[o] = a[o].min(c[o]);
                    b[o] = b[o].max(d[o]);
                }
                (a, b)
            },
        );
    ClassifierThresholds::from_extremes(lo, hi)
}

/// 1-based index of the first state where `G_o` clears its threshold. `None`
/// stands for infinity, which is also the answer when the demonstration's
/// task does not mention `o`.
pub fn first_index(
    demo: &Demonstration,
    o: usize,
    theta: &Theta,
    thresholds: &ClassifierThresholds,
) -> Option<usize> {
    if !demo.task.mentions(&theta.subgoals()[o]) {
        return None;
    }
    demo.states
        .iter()
        .position(|s| thresholds.holds(theta, o, s, &demo.world))
        .map(|i| i + 1)
}

/// Row-normalized precedence counts: `d[o1][o2]` estimates how likely `o2`
/// is a precondition of `o1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyMatrix {
    pub subgoals: Vec<SubgoalName>,
    pub bcount: Vec<Vec<u64>>,
    pub d: Vec<Vec<f64>>,
}

impl DependencyMatrix {
    pub fn from_counts(subgoals: Vec<SubgoalName>, bcount: Vec<Vec<u64>>) -> Self {
        let d = bcount
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect();
        DependencyMatrix { subgoals, bcount, d }
    }

    /// Every off-diagonal entry equal; the no-dependency baseline.
    pub fn uniform(subgoals: Vec<SubgoalName>) -> Self {
        let n = subgoals.len();
        let bcount = (0..n)
            .map(|i| (0..n).map(|j| u64::from(i != j)).collect())
            .collect();
        DependencyMatrix::from_counts(subgoals, bcount)
    }

    pub fn len(&self) -> usize {
        self.subgoals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subgoals.is_empty()
    }

    pub fn get(&self, o1: usize, o2: usize) -> f64 {
        self.d[o1][o2]
    }

    pub fn index_of(&self, name: &SubgoalName) -> Option<usize> {
        self.subgoals.iter().position(|s| s == name)
    }

    /// Up to `n` most likely preconditions of `o`, strongest first.
    pub fn top_predecessors(&self, o: usize, n: usize) -> Vec<(SubgoalName, f64)> {
        let mut row: Vec<(usize, f64)> = self.d[o].iter().copied().enumerate().filter(|&(_, p)| p > 0.0).collect();
        row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        row.into_iter()
            .take(n)
            .map(|(j, p)| (self.subgoals[j].clone(), p))
            .collect()
    }
}

impl fmt::Display for DependencyMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.subgoals.iter().map(|s| s.as_str().len()).max().unwrap_or(0);
        let mut out = format!("{:width$}", "");
        for s in &self.subgoals {
            write!(out, " {s:>w$}", w = s.as_str().len().max(5))?;
        }
        writeln!(f, "{out}")?;
        for (i, row) in self.d.iter().enumerate() {
            let mut line = format!("{:width$}", self.subgoals[i].as_str());
            for (j, p) in row.iter().enumerate() {
                write!(line, " {p:>w$.3}", w = self.subgoals[j].as_str().len().max(5))?;
            }
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Count, over demonstrations, how often each subgoal is first achieved
/// before another, then normalize rows.
pub fn discover(dataset: &[Demonstration], theta: &Theta, thresholds: &ClassifierThresholds) -> DependencyMatrix {
    let n = theta.subgoals().len();
    let bcount = dataset
        .par_iter()
        .map(|demo| {
            let first: Vec<Option<usize>> = (0..n).map(|o| first_index(demo, o, theta, thresholds)).collect();
            let mut c = vec![vec![0u64; n]; n];
            for (o1, f1) in first.iter().enumerate() {
                for (o2, f2) in first.iter().enumerate() {
                    if let (Some(a), Some(b)) = (f1, f2) {
                        if b < a {
                            c[o1][o2] += 1;
                        }
                    }
                }
            }
            c
        })
        .reduce(
            || vec![vec![0u64; n]; n],
            |mut a, b| {
                for (ra, rb) in a.iter_mut().zip(b) {
                    for (x, y) in ra.iter_mut().zip(rb) {
                        *x += y;
                    }
                }
                a
            },
        );
    DependencyMatrix::from_counts(theta.subgoals().to_vec(), bcount)
}

/// `λ^k · Π_{i<k} (1 − Π_{j>i} (1 − d(o_j, o_i)))` for the chain `o_1 .. o_k`.
pub fn priority(instruction: &[usize], d: &DependencyMatrix, length_bias: f64) -> f64 {
    let k = instruction.len();
    let mut p = length_bias.powi(k as i32);
    for i in 0..k.saturating_sub(1) {
        let miss: f64 = instruction[i + 1..]
            .iter()
            .map(|&oj| 1.0 - d.get(oj, instruction[i]))
            .product();
        p *= 1.0 - miss;
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalMode {
    /// Instructions grown from the dependency matrix.
    Guided,
    /// The goal alone, searched exhaustively.
    Blind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoalSearchConfig {
    /// Planner settings for each instruction in guided mode. Its
    /// `global_budget` caps a single attempt.
    pub planner: PlannerConfig,
    /// Probability an intermediate subgoal's `G` must reach before the
    /// search may move past it. `None` keeps the soft costs.
    pub subgoal_gate: Option<f64>,
    pub length_limit: usize,
    pub length_bias: f64,
    /// Expanded nodes shared by all attempts.
    pub node_cap: usize,
    pub mode: GoalMode,
}

impl Default for GoalSearchConfig {
    fn default() -> Self {
        GoalSearchConfig {
            planner: PlannerConfig {
                pop_rule: PopRule::DeepestSubgoal,
                global_budget: Some(ATTEMPT_BUDGET),
                ..PlannerConfig::unlimited()
            },
            subgoal_gate: Some(0.5),
            length_limit: LENGTH_LIMIT,
            length_bias: LENGTH_BIAS,
            node_cap: NODE_CAP,
            mode: GoalMode::Guided,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GoalPlan {
    pub plan: Plan,
    pub instruction: TaskAst,
    /// Nodes expanded across every attempt, this one included.
    pub expanded: usize,
    pub attempts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoalFailure {
    pub expanded: usize,
    pub attempts: usize,
}

/// Learned classifiers for every subgoal but the final goal, which is
/// checked against the world itself (0 or −∞). With a gate, intermediate
/// subgoals below it are treated as not achieved.
struct GoalGate<'a> {
    theta: &'a Theta,
    goal: usize,
    subgoal_gate: Option<f64>,
}

impl Classifier for GoalGate<'_> {
    fn log_goal(&self, world: &WorldConfig, subgoal: usize, s: &GridState) -> f64 {
        if subgoal != self.goal {
            let l = self.theta.log_goal(world, subgoal, s);
            return match self.subgoal_gate {
                Some(p) if l < p.ln() => f64::NEG_INFINITY,
                _ => l,
            };
        }
        if world.goal_holds(subgoal, s) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn log_init(&self, world: &WorldConfig, subgoal: usize, s: &GridState) -> f64 {
        self.theta.log_init(world, subgoal, s)
    }
}

struct Candidate {
    priority: f64,
    chain: Vec<usize>,
    names: Vec<String>,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // Max-heap: higher priority first, then shorter, then lexicographically smaller.
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then(other.chain.len().cmp(&self.chain.len()))
            .then(other.names.cmp(&self.names))
    }
}

/// Plan for a single final goal. Guided mode pops Then-chain instructions in
/// priority order and returns the first one the planner completes; blind
/// mode searches for the goal directly. Either way the goal itself is tested
/// on the world; intermediate subgoals go through `theta`.
pub fn plan_to_goal(
    goal: &SubgoalName,
    world: &WorldConfig,
    theta: &Theta,
    deps: &DependencyMatrix,
    s0: GridState,
    config: &GoalSearchConfig,
) -> Result<GoalPlan, GoalFailure> {
    let (Ok(g), Ok(world_goal)) = (theta.index_of(goal), world.subgoal_index(goal)) else {
        return Err(GoalFailure { expanded: 0, attempts: 0 });
    };
    let gate = GoalGate {
        theta,
        goal: world_goal,
        subgoal_gate: config.subgoal_gate,
    };
    let mut expanded = 0;
    let mut attempts = 0;
    let attempt = |chain: &[usize], planner: &PlannerConfig, expanded: &mut usize| {
        let remaining = config.node_cap.saturating_sub(*expanded);
        let names: Vec<SubgoalName> = chain.iter().map(|&o| theta.subgoals()[o].clone()).collect();
        let task = TaskAst::chain(&names);
        let fsm = compile(&task);
        let product = Product::new(world, &fsm, &gate, planner.lambda).ok()?;
        let cfg = PlannerConfig {
            global_budget: Some(planner.global_budget.map_or(remaining, |b| b.min(remaining))),
            ..planner.clone()
        };
        match plan(&product, &cfg, product.start(s0)) {
            Ok(p) => {
                *expanded += p.expanded;
                Some((p, task))
            }
            Err(f) => {
                *expanded += f.expanded;
                None
            }
        }
    };

    if config.mode == GoalMode::Blind {
        let planner = PlannerConfig {
            lambda: config.planner.lambda,
            seed: config.planner.seed,
            pop_rule: PopRule::GlobalBest,
            stop_rule: StopRule::FirstTerminal,
            ..PlannerConfig::unlimited()
        };
        attempts += 1;
        return match attempt(&[g], &planner, &mut expanded) {
            Some((plan, instruction)) => Ok(GoalPlan {
                plan,
                instruction,
                expanded,
                attempts,
            }),
            None => Err(GoalFailure { expanded, attempts }),
        };
    }

    let name = |o: usize| theta.subgoals()[o].as_str().to_string();
    let mut heap = BinaryHeap::new();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    heap.push(Candidate {
        priority: priority(&[g], deps, config.length_bias),
        chain: vec![g],
        names: vec![name(g)],
    });
    seen.insert(vec![g]);
    while let Some(c) = heap.pop() {
        if expanded >= config.node_cap {
            break;
        }
        attempts += 1;
        if let Some((plan, instruction)) = attempt(&c.chain, &config.planner, &mut expanded) {
            return Ok(GoalPlan {
                plan,
                instruction,
                expanded,
                attempts,
            });
        }
        if c.chain.len() >= config.length_limit {
            continue;
        }
        for o in 0..deps.len() {
            if c.chain.contains(&o) || !c.chain.iter().any(|&t| deps.get(t, o) > 0.0) {
                continue;
            }
            let mut chain = Vec::with_capacity(c.chain.len() + 1);
            chain.push(o);
            chain.extend_from_slice(&c.chain);
            if !seen.insert(chain.clone()) {
                continue;
            }
            let names = chain.iter().map(|&o| name(o)).collect();
            heap.push(Candidate {
                priority: priority(&chain, deps, config.length_bias),
                chain,
                names,
            });
        }
    }
    Err(GoalFailure { expanded, attempts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Rules;

    fn names(n: &[&str]) -> Vec<SubgoalName> {
        n.iter().map(|s| s.parse().unwrap()).collect()
    }

    #[test]
    fn geometric_mean_threshold() {
        let t = ClassifierThresholds::from_extremes(vec![0.1], vec![0.9]);
        assert!((t.threshold[0] - 0.3).abs() < 1e-12);
        let t = ClassifierThresholds::from_extremes(vec![0.4], vec![0.4]);
        assert!((t.threshold[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn priority_examples() {
        let d = DependencyMatrix {
            subgoals: names(&["a", "b"]),
            bcount: vec![vec![0, 1], vec![1, 0]],
            d: vec![vec![0.0, 0.5], vec![0.5, 0.0]],
        };
        assert!((priority(&[0], &d, 0.9) - 0.9).abs() < 1e-12);
        assert!((priority(&[0, 1], &d, 0.9) - 0.405).abs() < 1e-12);
        let zero = DependencyMatrix::from_counts(names(&["a", "b"]), vec![vec![0, 0], vec![0, 0]]);
        assert_eq!(priority(&[0, 1], &zero, 0.9), 0.0);
    }

    #[test]
    fn rows_normalize() {
        let m = DependencyMatrix::from_counts(names(&["a", "b", "c"]), vec![vec![0, 3, 1], vec![0, 0, 0], vec![2, 2, 0]]);
        assert_eq!(m.d[0], vec![0.0, 0.75, 0.25]);
        assert_eq!(m.d[1], vec![0.0, 0.0, 0.0]);
        assert_eq!(m.top_predecessors(2, 3), vec![(names(&["a"])[0].clone(), 0.5), (names(&["b"])[0].clone(), 0.5)]);
        let u = DependencyMatrix::uniform(names(&["a", "b", "c"]));
        assert_eq!(u.d[1], vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn table_lists_every_subgoal() {
        let m = DependencyMatrix::uniform(Rules::default().subgoal_names());
        let text = m.to_string();
        assert_eq!(text.lines().count(), m.len() + 1);
        assert!(text.lines().nth(1).unwrap().starts_with(m.subgoals[0].as_str()));
    }

    #[test]
    fn candidates_order_by_priority_then_length_then_name() {
        let c = |p: f64, chain: Vec<usize>, n: &[&str]| Candidate {
            priority: p,
            chain,
            names: n.iter().map(|s| s.to_string()).collect(),
        };
        let mut heap = BinaryHeap::new();
        heap.push(c(0.5, vec![1, 0], &["b", "a"]));
        heap.push(c(0.5, vec![0], &["a"]));
        heap.push(c(0.5, vec![2, 0], &["a2", "a"]));
        heap.push(c(0.9, vec![3, 2, 1], &["z", "y", "x"]));
        let order: Vec<Vec<usize>> = std::iter::from_fn(|| heap.pop().map(|c| c.chain)).collect();
        assert_eq!(order, vec![vec![3, 2, 1], vec![0], vec![2, 0], vec![1, 0]]);
    }
}
