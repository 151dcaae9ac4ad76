//! World files and random scenario sampling.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvError, GoalPredicate, GridState, Item, ObjectKind, Placement, Rules, Terrain, WorldConfig};
use crate::tl::TaskAst;

pub const WORLD_FILE_VERSION: u32 = 1;

/// Contents of a world file. Either a fixed `map`, or a `width` x `height`
/// grid with `objects` scattered at random for each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub version: u32,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    #[serde(default)]
    pub map: Option<Vec<String>>,
    #[serde(default)]
    pub width: usize,
    #[serde(default)]
    pub height: usize,
    #[serde(default)]
    pub objects: BTreeMap<ObjectKind, usize>,
    /// Random interior wall cells.
    #[serde(default)]
    pub walls: usize,
    /// Starting inventory; when absent, the items a task needs but does not
    /// produce itself.
    #[serde(default)]
    pub inventory: Option<Vec<Item>>,
    #[serde(default)]
    pub rules: Option<Rules>,
}

fn default_capacity() -> usize {
    8
}

/// A world together with a start state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub world: WorldConfig,
    pub start: GridState,
}

impl WorldSpec {
    /// Open `width` x `height` floor with one of each listed object.
    pub fn random(width: usize, height: usize, objects: &[(ObjectKind, usize)]) -> Self {
        WorldSpec {
            version: WORLD_FILE_VERSION,
            capacity: default_capacity(),
            map: None,
            width,
            height,
            objects: objects.iter().copied().collect(),
            walls: 0,
            inventory: None,
            rules: None,
        }
    }

    /// Every object kind of the default rules once, on a 6x6 floor.
    pub fn standard() -> Self {
        let kinds: Vec<(ObjectKind, usize)> = ObjectKind::ALL
            .iter()
            .filter(|&&k| k != ObjectKind::Key)
            .map(|&k| (k, 1))
            .collect();
        WorldSpec::random(6, 6, &kinds)
    }

    pub fn from_toml(text: &str) -> Result<Self, EnvError> {
        let spec: WorldSpec = toml::from_str(text).map_err(|e| EnvError::InvalidWorld(e.to_string()))?;
        if spec.version != WORLD_FILE_VERSION {
            return Err(EnvError::InvalidWorld(format!(
                "world file version {} (expected {WORLD_FILE_VERSION})",
                spec.version
            )));
        }
        if spec.map.is_none() && (spec.width == 0 || spec.height == 0) {
            return Err(EnvError::InvalidWorld("need either `map` or `width`/`height`".into()));
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("world spec serializes")
    }

    pub fn rules(&self) -> Rules {
        self.rules.clone().unwrap_or_default()
    }

    /// Draw a scenario. `task` decides the default starting inventory.
    pub fn sample(&self, seed: u64, task: Option<&TaskAst>) -> Result<Scenario, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rules = self.rules();
        let (world, agent) = match &self.map {
            Some(rows) => WorldConfig::from_ascii(rows, self.capacity, rules.clone())?,
            None => (self.random_layout(&mut rng, rules.clone())?, None),
        };
        let agent = match agent {
            Some(a) => a,
            None => {
                let free: Vec<(u8, u8)> = (0..world.height())
                    .flat_map(|y| (0..world.width()).map(move |x| (x, y)))
                    .filter(|&(x, y)| world.terrain(x, y) == Terrain::Floor && world.object_at(x, y).is_none())
                    .map(|(x, y)| (x as u8, y as u8))
                    .collect();
                *free
                    .choose(&mut rng)
                    .ok_or_else(|| EnvError::InvalidWorld("no free cell for the agent".into()))?
            }
        };
        let inventory = match (&self.inventory, task) {
            (Some(items), _) => items.clone(),
            (None, Some(task)) => task_prerequisites(&rules, task),
            (None, None) => Vec::new(),
        };
        if inventory.len() > world.capacity() {
            return Err(EnvError::InvalidWorld("starting inventory exceeds capacity".into()));
        }
        let start = world.initial_state(agent, &inventory);
        Ok(Scenario { world, start })
    }

    fn random_layout(&self, rng: &mut ChaCha8Rng, rules: Rules) -> Result<WorldConfig, EnvError> {
        let (w, h) = (self.width, self.height);
        let mut cells: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
        cells.shuffle(rng);
        let wanted: usize = self.objects.values().sum::<usize>() + self.walls + 1;
        if wanted > cells.len() {
            return Err(EnvError::InvalidWorld("too many objects for the grid".into()));
        }
        let mut terrain = vec![Terrain::Floor; w * h];
        let mut cells = cells.into_iter();
        for _ in 0..self.walls {
            let (x, y) = cells.next().unwrap();
            terrain[y * w + x] = Terrain::Wall;
        }
        let mut objects = Vec::new();
        for (&kind, &count) in &self.objects {
            for _ in 0..count {
                let (x, y) = cells.next().unwrap();
                objects.push(Placement {
                    kind,
                    x: x as u8,
                    y: y as u8,
                });
            }
        }
        // Keep object ids stable under the shuffle: order by position.
        objects.sort_by_key(|p| (p.y, p.x));
        WorldConfig::new(w, h, terrain, objects, self.capacity, rules)
    }
}

/// Items the task's subgoals consume or need as tools, minus those some
/// subgoal of the task produces.
pub fn task_prerequisites(rules: &Rules, task: &TaskAst) -> Vec<Item> {
    let mut produced = BTreeSet::new();
    let mut needed = BTreeSet::new();
    for name in task.atoms() {
        let Some(idx) = rules.subgoal_index(name) else { continue };
        let pred = rules.subgoals[idx].predicate;
        if let GoalPredicate::Has(item) = pred {
            produced.insert(item);
        }
        needed.extend(rules.requirements(pred));
    }
    needed.difference(&produced).copied().collect()
}
