//! Dataset construction and evaluation harnesses.

use std::collections::HashSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demo::{generate_demo, DemoError, Demonstration};
use crate::dependency::{plan_to_goal, DependencyMatrix, GoalSearchConfig};
use crate::env::{features, GridState, WorldConfig};
use crate::fsm::compile;
use crate::model::{Classifier, Theta, Which};
use crate::planner::{plan, PlannerConfig, Product};
use crate::tl::{satisfies, SubgoalName, TaskAst};
use crate::world::WorldSpec;

/// `per_task` demonstrations for every task. Seeds are derived from `seed`,
/// the task position and the demo number, so the result does not depend on
/// thread scheduling.
pub fn build_dataset(
    spec: &WorldSpec,
    tasks: &[TaskAst],
    per_task: usize,
    seed: u64,
    noise: f64,
) -> Result<Vec<Demonstration>, DemoError> {
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..per_task).map(move |k| (t, k)))
        .collect();
    jobs.par_iter()
        .map(|&(t, k)| generate_demo(spec, &tasks[t], demo_seed(seed, t, k), noise))
        .collect()
}

pub fn demo_seed(seed: u64, task: usize, k: usize) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add((task as u64) << 32)
        .wrapping_add(k as u64)
}

/// Whether the environment states satisfy `task` under ground truth.
pub fn oracle_satisfies(world: &WorldConfig, states: &[GridState], task: &TaskAst) -> bool {
    satisfies(states, task, |name, s| {
        world.subgoal_index(name).is_ok_and(|i| world.goal_holds(i, s))
    })
    .unwrap_or(false)
}

/// Distinct states reachable from the scenarios of `seeds`, up to `limit`
/// per scenario.
pub fn reachable_sample(spec: &WorldSpec, seeds: &[u64], limit: usize) -> Vec<(WorldConfig, Vec<GridState>)> {
    seeds
        .iter()
        .filter_map(|&seed| {
            let sc = spec.sample(seed, None).ok()?;
            let states = sc.world.reachable_states(sc.start, limit);
            Some((sc.world, states))
        })
        .collect()
}

/// Fraction of (state, subgoal) pairs on which `G_o(s) >= threshold[o]`
/// matches the ground-truth predicate.
pub fn classifier_agreement(
    theta: &Theta,
    samples: &[(WorldConfig, Vec<GridState>)],
    subgoals: &[SubgoalName],
    threshold: impl Fn(usize) -> f64,
) -> f64 {
    let (mut agree, mut total) = (0usize, 0usize);
    for (world, states) in samples {
        for name in subgoals {
            let (Ok(o), Ok(t)) = (world.subgoal_index(name), theta.index_of(name)) else {
                continue;
            };
            for s in states {
                let predicted = theta.eval(Which::G, t, features(s, world)) >= threshold(t);
                agree += (predicted == world.goal_holds(o, s)) as usize;
                total += 1;
            }
        }
    }
    agree as f64 / total.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean over successful runs.
    pub mean_cost: f64,
    pub mean_expanded: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskReport>,
    pub success_rate: f64,
    pub wall_time: f64,
}

/// Outcome of planning once for a task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOutcome {
    pub success: bool,
    pub cost: f64,
    pub expanded: usize,
}

/// Plan for `task` in the scenario drawn with `seed`; success means the
/// plan's states satisfy the task under ground truth.
pub fn run_task<C: Classifier + ?Sized>(
    spec: &WorldSpec,
    classifier: &C,
    task: &TaskAst,
    seed: u64,
    config: &PlannerConfig,
) -> RunOutcome {
    let failed = RunOutcome {
        success: false,
        cost: f64::NAN,
        expanded: 0,
    };
    let Ok(sc) = spec.sample(seed, Some(task)) else { return failed };
    let fsm = compile(task);
    let Ok(product) = Product::new(&sc.world, &fsm, classifier, config.lambda) else {
        return failed;
    };
    let config = PlannerConfig {
        seed,
        ..config.clone()
    };
    match plan(&product, &config, product.start(sc.start)) {
        Ok(p) => RunOutcome {
            success: oracle_satisfies(&sc.world, &p.env_states(), task),
            cost: p.cost,
            expanded: p.expanded,
        },
        Err(f) => RunOutcome {
            expanded: f.expanded,
            ..failed
        },
    }
}

/// Success rates over `seeds` for each task.
pub fn evaluate<C: Classifier + ?Sized>(
    spec: &WorldSpec,
    classifier: &C,
    tasks: &[TaskAst],
    seeds: &[u64],
    config: &PlannerConfig,
) -> EvalReport {
    let started = Instant::now();
    let mut reports = Vec::new();
    let (mut ok, mut runs) = (0, 0);
    for task in tasks {
        let outcomes: Vec<RunOutcome> = seeds
            .par_iter()
            .map(|&seed| run_task(spec, classifier, task, seed, config))
            .collect();
        let wins: Vec<&RunOutcome> = outcomes.iter().filter(|o| o.success).collect();
        let successes = wins.len();
        reports.push(TaskReport {
            task: task.to_string(),
            runs: outcomes.len(),
            successes,
            success_rate: successes as f64 / outcomes.len().max(1) as f64,
            mean_cost: wins.iter().map(|o| o.cost).sum::<f64>() / successes.max(1) as f64,
            mean_expanded: outcomes.iter().map(|o| o.expanded as f64).sum::<f64>() / outcomes.len().max(1) as f64,
        });
        ok += successes;
        runs += outcomes.len();
    }
    EvalReport {
        tasks: reports,
        success_rate: ok as f64 / runs.max(1) as f64,
        wall_time: started.elapsed().as_secs_f64(),
    }
}

/// Nodes expanded by goal-only search in the scenario of each seed, or
/// `None` where it found nothing within the cap.
pub fn goal_search_runs(
    spec: &WorldSpec,
    theta: &Theta,
    deps: &DependencyMatrix,
    goal: &SubgoalName,
    seeds: &[u64],
    config: &GoalSearchConfig,
) -> Vec<Option<usize>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let sc = spec.sample(seed, None).ok()?;
            let config = GoalSearchConfig {
                planner: PlannerConfig {
                    seed,
                    ..config.planner.clone()
                },
                ..config.clone()
            };
            plan_to_goal(goal, &sc.world, theta, deps, sc.start, &config)
                .ok()
                .map(|p| p.expanded)
        })
        .collect()
}

/// Fewest expanded nodes by which a `rate` fraction of the runs had
/// succeeded; `None` if they never got there.
pub fn nodes_for_success_rate(runs: &[Option<usize>], rate: f64) -> Option<usize> {
    let mut done: Vec<usize> = runs.iter().flatten().copied().collect();
    done.sort_unstable();
    let need = (rate * runs.len() as f64).ceil().max(1.0) as usize;
    done.get(need - 1).copied()
}

/// Subgoals mentioned by any of the tasks, in first-mention order.
pub fn mentioned_subgoals(tasks: &[TaskAst]) -> Vec<SubgoalName> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in tasks {
        for a in t.atoms() {
            if seen.insert(a.clone()) {
                out.push(a.clone());
            }
        }
    }
    out
}

pub const PRIMITIVE_TASKS: [&str; 6] = [
    "grab-axe",
    "grab-pickaxe",
    "mine-wood",
    "mine-coal",
    "craft-wood-plank",
    "craft-stick",
];

pub const COMPOSITIONAL_TASKS: [&str; 6] = [
    "grab-axe then mine-wood",
    "mine-wood then craft-wood-plank",
    "craft-wood-plank then craft-stick",
    "grab-pickaxe then mine-iron-ore",
    "mine-coal and mine-iron-ore",
    "craft-wood-plank then craft-boat",
];

pub const HELD_OUT_TASKS: [&str; 4] = [
    "grab-axe then mine-wood then craft-wood-plank",
    "grab-pickaxe then mine-coal",
    "mine-wood then craft-wood-plank then craft-stick",
    "grab-pickaxe then (mine-iron-ore or mine-coal)",
];

/// The twelve training tasks, primitive ones first.
pub fn training_tasks() -> Vec<TaskAst> {
    PRIMITIVE_TASKS
        .iter()
        .chain(COMPOSITIONAL_TASKS.iter())
        .map(|s| crate::tl::parse_task(s).expect("built-in task"))
        .collect()
}

pub fn held_out_tasks() -> Vec<TaskAst> {
    HELD_OUT_TASKS
        .iter()
        .map(|s| crate::tl::parse_task(s).expect("built-in task"))
        .collect()
}
