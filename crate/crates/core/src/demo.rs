//! Expert demonstrations and JSONL datasets.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, GridState, WorldConfig};
use crate::fsm::compile;
use crate::model::Oracle;
use crate::planner::{plan, AugmentedAction, AugmentedState, PlannerConfig, Product};
use crate::tl::{satisfies, TaskAst};
use crate::world::{Scenario, WorldSpec};

pub const DATASET_VERSION: u32 = 1;

/// Scenarios tried per demonstration before giving up.
pub const DEMO_RETRIES: u64 = 20;

/// Node cap of the expert planner per attempt.
const EXPERT_BUDGET: usize = 200_000;

/// A trajectory paired with the task it accomplishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task: TaskAst,
    pub world: WorldConfig,
    pub states: Vec<GridState>,
    pub actions: Vec<Action>,
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("task `{task}` not solvable after {attempts} sampled scenarios")]
    Unsolvable { task: String, attempts: u64 },
    #[error(transparent)]
    World(#[from] crate::env::EnvError),
    #[error("dataset line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Demonstration {
    /// Re-run the actions from the first state; true if every state matches.
    pub fn replays(&self) -> bool {
        if self.states.len() != self.actions.len() + 1 {
            return false;
        }
        self.actions
            .iter()
            .zip(self.states.windows(2))
            .all(|(&a, w)| self.world.transition(&w[0], a) == w[1])
    }

    /// Whether the states satisfy the task under the ground-truth predicates.
    pub fn satisfies_task(&self) -> bool {
        let world = &self.world;
        satisfies(&self.states, &self.task, |name, s| {
            world.subgoal_index(name).is_ok_and(|i| world.goal_holds(i, s))
        })
        .unwrap_or(false)
    }
}

/// Optimal plan for `task` under ground-truth classifiers, starting at `start`.
pub fn expert_plan(world: &WorldConfig, task: &TaskAst, start: AugmentedState) -> Option<crate::planner::Plan> {
    let fsm = compile(task);
    let product = Product::new(world, &fsm, &Oracle, 1.0).ok()?;
    let config = PlannerConfig {
        global_budget: Some(EXPERT_BUDGET),
        ..PlannerConfig::unlimited()
    };
    plan(&product, &config, start).ok()
}

/// Sample scenarios from `spec` until the expert solves `task` in one.
pub fn generate_demo(spec: &WorldSpec, task: &TaskAst, seed: u64, noise: f64) -> Result<Demonstration, DemoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..DEMO_RETRIES {
        let scenario = spec.sample(rng.gen(), Some(task))?;
        if let Some(demo) = demo_in(&scenario, task, &mut rng, noise) {
            return Ok(demo);
        }
    }
    Err(DemoError::Unsolvable {
        task: task.to_string(),
        attempts: DEMO_RETRIES,
    })
}

/// Roll out the expert in one scenario. With probability `noise` per step a
/// random move replaces the planned action, as long as the task stays
/// solvable afterwards; the expert then replans.
pub fn demo_in(scenario: &Scenario, task: &TaskAst, rng: &mut impl Rng, noise: f64) -> Option<Demonstration> {
    let fsm = compile(task);
    let world = &scenario.world;
    let product = Product::new(world, &fsm, &Oracle, 1.0).ok()?;
    let mut cur = product.start(scenario.start);
    let mut current = expert_plan(world, task, cur)?;
    let mut step = 0;
    let mut states = vec![scenario.start];
    let mut actions = Vec::new();
    while step < current.actions.len() {
        let planned = current.actions[step];
        let AugmentedAction::Primitive(p) = planned else {
            cur = product.transition(&cur, planned).ok()?;
            step += 1;
            continue;
        };
        if noise > 0.0 && rng.gen::<f64>() < noise {
            let moves: Vec<Action> = Action::ALL[..4].iter().copied().filter(|&a| a != p).collect();
            let alt = moves[rng.gen_range(0..moves.len())];
            let next = AugmentedState {
                s: world.transition(&cur.s, alt),
                v: cur.v,
            };
            if let Some(replan) = expert_plan(world, task, next) {
                cur = next;
                states.push(cur.s);
                actions.push(alt);
                current = replan;
                step = 0;
                continue;
            }
        }
        cur = product.transition(&cur, planned).ok()?;
        states.push(cur.s);
        actions.push(p);
        step += 1;
    }
    let demo = Demonstration {
        task: task.clone(),
        world: world.clone(),
        states,
        actions,
    };
    demo.satisfies_task().then_some(demo)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

/// Write a dataset: a header line, then one demonstration per line.
pub fn write_dataset(mut out: impl Write, demos: &[Demonstration]) -> std::io::Result<()> {
    let header = Header {
        format: "rsg-demos".into(),
        version: DATASET_VERSION,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for d in demos {
        writeln!(out, "{}", serde_json::to_string(d)?)?;
    }
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<Vec<Demonstration>, DemoError> {
    let mut lines = input.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| DemoError::Format {
            line: 1,
            message: format!("bad header: {e}"),
        })?,
        None => {
            return Err(DemoError::Format {
                line: 1,
                message: "empty dataset".into(),
            })
        }
    };
    if header.format != "rsg-demos" || header.version != DATASET_VERSION {
        return Err(DemoError::Format {
            line: 1,
            message: format!("unsupported dataset {} v{}", header.format, header.version),
        });
    }
    let mut demos = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let demo: Demonstration = serde_json::from_str(&line).map_err(|e| DemoError::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !demo.replays() {
            return Err(DemoError::Format {
                line: i + 1,
                message: "actions do not reproduce the states".into(),
            });
        }
        demos.push(demo);
    }
    Ok(demos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Item, Rules};
    use crate::tl::parse_task;

    #[test]
    fn adjacent_axe_demo() {
        let spec = WorldSpec {
            map: Some(vec!["@a".into(), "..".into()]),
            ..WorldSpec::random(2, 2, &[])
        };
        let task = parse_task("grab-axe").unwrap();
        let demo = generate_demo(&spec, &task, 3, 0.0).unwrap();
        assert_eq!(demo.actions, vec![Action::Right, Action::Toggle]);
        assert!(demo.states.last().unwrap().has(Item::Axe));
        assert!(demo.replays());
    }

    #[test]
    fn noisy_demos_still_satisfy() {
        let spec = WorldSpec::standard();
        let task = parse_task("grab-axe then mine-wood").unwrap();
        for seed in 0..5 {
            let demo = generate_demo(&spec, &task, seed, 0.3).unwrap();
            assert!(demo.satisfies_task());
            assert!(demo.replays());
        }
    }

    #[test]
    fn dataset_round_trip() {
        let spec = WorldSpec::standard();
        let task = parse_task("mine-wood then craft-wood-plank").unwrap();
        let demos: Vec<_> = (0..3).map(|s| generate_demo(&spec, &task, s, 0.05).unwrap()).collect();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &demos).unwrap();
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back, demos);
        assert_eq!(back[0].world.rules(), &Rules::default());
    }
}
