//! A small deterministic grid crafting world.
//!
//! The agent walks on a grid, picks up tools, mines resources and crafts
//! items at stations. Doors open once any switch is toggled; rivers need a
//! boat in the inventory.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tl::SubgoalName;

/// Cost of every primitive action.
pub const STEP_COST: f64 = 0.1;

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = EnvError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(EnvError::UnknownName { kind: stringify!($name), name: s.to_string() }),
                }
            }
        }
    };
}

named_enum! {
    /// Things that can sit in the inventory.
    Item {
        Axe => "axe",
        Pickaxe => "pickaxe",
        Key => "key",
        Wood => "wood",
        Coal => "coal",
        IronOre => "iron-ore",
        GoldOre => "gold-ore",
        WoodPlank => "wood-plank",
        Stick => "stick",
        IronIngot => "iron-ingot",
        Boat => "boat",
    }
}

named_enum! {
    /// Things placed on the map.
    ObjectKind {
        Tree => "tree",
        CoalOre => "coal-ore",
        IronOre => "iron-ore",
        GoldOre => "gold-ore",
        Axe => "axe",
        Pickaxe => "pickaxe",
        Key => "key",
        Switch => "switch",
        Workbench => "workbench",
        Furnace => "furnace",
        Dock => "dock",
    }
}

named_enum! {
    Action {
        Up => "up",
        Down => "down",
        Left => "left",
        Right => "right",
        Toggle => "toggle",
    }
}

named_enum! {
    Terrain {
        Floor => "floor",
        Wall => "wall",
        River => "river",
        Door => "door",
    }
}

pub const ITEM_COUNT: usize = 11;
pub const KIND_COUNT: usize = 11;

impl ObjectKind {
    /// The item picked up when toggling a tool lying on the map.
    pub fn pickup(self) -> Option<Item> {
        match self {
            ObjectKind::Axe => Some(Item::Axe),
            ObjectKind::Pickaxe => Some(Item::Pickaxe),
            ObjectKind::Key => Some(Item::Key),
            _ => None,
        }
    }

    fn glyph(self) -> char {
        match self {
            ObjectKind::Tree => 'T',
            ObjectKind::CoalOre => 'C',
            ObjectKind::IronOre => 'I',
            ObjectKind::GoldOre => 'G',
            ObjectKind::Axe => 'a',
            ObjectKind::Pickaxe => 'p',
            ObjectKind::Key => 'k',
            ObjectKind::Switch => 's',
            ObjectKind::Workbench => 'W',
            ObjectKind::Furnace => 'F',
            ObjectKind::Dock => 'D',
        }
    }

    fn from_glyph(c: char) -> Option<Self> {
        ObjectKind::ALL.iter().copied().find(|k| k.glyph() == c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
    #[error("unknown subgoal `{0}`")]
    UnknownSubgoal(SubgoalName),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CraftingRule {
    pub output: Item,
    #[serde(default)]
    pub station: Option<ObjectKind>,
    #[serde(default)]
    pub tool: Option<Item>,
    pub ingredients: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningRule {
    pub resource: ObjectKind,
    pub yields: Item,
    #[serde(default)]
    pub tool: Option<Item>,
}

/// Ground-truth condition attached to a subgoal name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalPredicate {
    Has(Item),
    SwitchOn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgoalSpec {
    pub name: SubgoalName,
    pub predicate: GoalPredicate,
}

/// Crafting, mining and subgoal definitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rules {
    pub crafting: Vec<CraftingRule>,
    pub mining: Vec<MiningRule>,
    pub subgoals: Vec<SubgoalSpec>,
}

impl Default for Rules {
    fn default() -> Self {
        use Item::*;
        let craft = |output, station, tool, ingredients: &[Item]| CraftingRule {
            output,
            station: Some(station),
            tool,
            ingredients: ingredients.to_vec(),
        };
        let mine = |resource, yields, tool| MiningRule {
            resource,
            yields,
            tool: Some(tool),
        };
        let has = |name: &str, item| SubgoalSpec {
            name: SubgoalName::new(name).unwrap(),
            predicate: GoalPredicate::Has(item),
        };
        Rules {
            crafting: vec![
                craft(WoodPlank, ObjectKind::Workbench, None, &[Wood]),
                craft(Stick, ObjectKind::Workbench, None, &[WoodPlank]),
                craft(IronIngot, ObjectKind::Furnace, None, &[IronOre, Coal]),
                craft(Boat, ObjectKind::Dock, Some(Axe), &[WoodPlank]),
            ],
            mining: vec![
                mine(ObjectKind::Tree, Wood, Axe),
                mine(ObjectKind::CoalOre, Coal, Pickaxe),
                mine(ObjectKind::IronOre, IronOre, Pickaxe),
                mine(ObjectKind::GoldOre, GoldOre, Pickaxe),
            ],
            subgoals: vec![
                has("grab-axe", Axe),
                has("grab-pickaxe", Pickaxe),
                has("grab-key", Key),
                SubgoalSpec {
                    name: SubgoalName::new("toggle-switch").unwrap(),
                    predicate: GoalPredicate::SwitchOn,
                },
                has("mine-wood", Wood),
                has("mine-coal", Coal),
                has("mine-iron-ore", IronOre),
                has("mine-gold-ore", GoldOre),
                has("craft-wood-plank", WoodPlank),
                has("craft-stick", Stick),
                has("craft-iron-ingot", IronIngot),
                has("craft-boat", Boat),
            ],
        }
    }
}

impl Rules {
    pub fn subgoal_index(&self, name: &SubgoalName) -> Option<usize> {
        self.subgoals.iter().position(|s| &s.name == name)
    }

    pub fn subgoal_names(&self) -> Vec<SubgoalName> {
        self.subgoals.iter().map(|s| s.name.clone()).collect()
    }

    /// Items a subgoal needs in the inventory before it can be achieved.
    pub fn requirements(&self, predicate: GoalPredicate) -> Vec<Item> {
        let GoalPredicate::Has(item) = predicate else {
            return Vec::new();
        };
        if let Some(rule) = self.mining.iter().find(|r| r.yields == item) {
            return rule.tool.into_iter().collect();
        }
        if let Some(rule) = self.crafting.iter().find(|r| r.output == item) {
            let mut need = rule.ingredients.clone();
            need.extend(rule.tool);
            return need;
        }
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub kind: ObjectKind,
    pub x: u8,
    pub y: u8,
}

/// Static layout and rules of one world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WorldConfigRepr", into = "WorldConfigRepr")]
pub struct WorldConfig {
    width: usize,
    height: usize,
    terrain: Vec<Terrain>,
    objects: Vec<Placement>,
    capacity: usize,
    rules: Rules,
    object_at: Vec<Option<u8>>,
    has_switch: bool,
}

#[derive(Serialize, Deserialize)]
struct WorldConfigRepr {
    map: Vec<String>,
    capacity: usize,
    #[serde(default)]
    rules: Option<Rules>,
}

impl TryFrom<WorldConfigRepr> for WorldConfig {
    type Error = EnvError;

    fn try_from(r: WorldConfigRepr) -> Result<Self, Self::Error> {
        let (world, _) = WorldConfig::from_ascii(&r.map, r.capacity, r.rules.unwrap_or_default())?;
        Ok(world)
    }
}

impl From<WorldConfig> for WorldConfigRepr {
    fn from(w: WorldConfig) -> Self {
        let rules = (w.rules != Rules::default()).then(|| w.rules.clone());
        WorldConfigRepr {
            map: w.render_rows(None),
            capacity: w.capacity,
            rules,
        }
    }
}

impl WorldConfig {
    pub fn new(
        width: usize,
        height: usize,
        terrain: Vec<Terrain>,
        objects: Vec<Placement>,
        capacity: usize,
        rules: Rules,
    ) -> Result<Self, EnvError> {
        if width == 0 || height == 0 || width > 255 || height > 255 {
            return Err(EnvError::InvalidWorld(format!("bad size {width}x{height}")));
        }
        if terrain.len() != width * height {
            return Err(EnvError::InvalidWorld("terrain size mismatch".into()));
        }
        if objects.len() > 64 {
            return Err(EnvError::InvalidWorld("at most 64 objects".into()));
        }
        let mut object_at = vec![None; width * height];
        for (i, p) in objects.iter().enumerate() {
            let (x, y) = (p.x as usize, p.y as usize);
            if x >= width || y >= height {
                return Err(EnvError::InvalidWorld(format!("object at ({x},{y}) out of bounds")));
            }
            if terrain[y * width + x] != Terrain::Floor {
                return Err(EnvError::InvalidWorld(format!("object at ({x},{y}) not on floor")));
            }
            if object_at[y * width + x].replace(i as u8).is_some() {
                return Err(EnvError::InvalidWorld(format!("two objects at ({x},{y})")));
            }
        }
        for rule in &rules.crafting {
            if rule.ingredients.contains(&rule.output) {
                return Err(EnvError::InvalidWorld(format!("{} is its own ingredient", rule.output)));
            }
        }
        let has_switch = objects.iter().any(|p| p.kind == ObjectKind::Switch);
        Ok(WorldConfig {
            width,
            height,
            terrain,
            objects,
            capacity,
            rules,
            object_at,
            has_switch,
        })
    }

    /// Build a world from ASCII rows. `.` floor, `#` wall, `~` river,
    /// `+` door, `@` agent start, letters for objects (see [`Self::render`]).
    /// Returns the world and the agent start if one was marked.
    pub fn from_ascii(
        rows: &[impl AsRef<str>],
        capacity: usize,
        rules: Rules,
    ) -> Result<(Self, Option<(u8, u8)>), EnvError> {
        let height = rows.len();
        let width = rows.first().map(|r| r.as_ref().chars().count()).unwrap_or(0);
        let mut terrain = Vec::with_capacity(width * height);
        let mut objects = Vec::new();
        let mut agent = None;
        for (y, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.chars().count() != width {
                return Err(EnvError::InvalidWorld(format!("row {y} has the wrong width")));
            }
            for (x, c) in row.chars().enumerate() {
                let t = match c {
                    '#' => Terrain::Wall,
                    '~' => Terrain::River,
                    '+' => Terrain::Door,
                    '.' => Terrain::Floor,
                    '@' => {
                        agent = Some((x as u8, y as u8));
                        Terrain::Floor
                    }
                    c => match ObjectKind::from_glyph(c) {
                        Some(kind) => {
                            objects.push(Placement {
                                kind,
                                x: x as u8,
                                y: y as u8,
                            });
                            Terrain::Floor
                        }
                        None => {
                            return Err(EnvError::InvalidWorld(format!("unknown map glyph {c:?}")))
                        }
                    },
                };
                terrain.push(t);
            }
        }
        Ok((WorldConfig::new(width, height, terrain, objects, capacity, rules)?, agent))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rules(&self) -> &Rules {
        &self.rules
    }

    pub fn objects(&self) -> &[Placement] {
        &self.objects
    }

    pub fn terrain(&self, x: usize, y: usize) -> Terrain {
        self.terrain[y * self.width + x]
    }

    pub fn object_at(&self, x: usize, y: usize) -> Option<usize> {
        self.object_at[y * self.width + x].map(usize::from)
    }

    pub fn subgoal_count(&self) -> usize {
        self.rules.subgoals.len()
    }

    pub fn subgoal(&self, index: usize) -> &SubgoalSpec {
        &self.rules.subgoals[index]
    }

    pub fn subgoal_index(&self, name: &SubgoalName) -> Result<usize, EnvError> {
        self.rules
            .subgoal_index(name)
            .ok_or_else(|| EnvError::UnknownSubgoal(name.clone()))
    }

    /// The state at the start of an episode: nothing mined, no switch on.
    pub fn initial_state(&self, agent: (u8, u8), inventory: &[Item]) -> GridState {
        let mut s = GridState {
            agent,
            inventory: [0; ITEM_COUNT],
            removed: 0,
            toggled: 0,
        };
        for &item in inventory {
            s.inventory[item.index()] += 1;
        }
        s
    }

    pub fn doors_open(&self, s: &GridState) -> bool {
        self.has_switch && s.toggled != 0
    }

    fn passable(&self, s: &GridState, x: usize, y: usize) -> bool {
        match self.terrain(x, y) {
            Terrain::Floor => true,
            Terrain::Wall => false,
            Terrain::River => s.has(Item::Boat),
            Terrain::Door => self.doors_open(s) || s.has(Item::Key),
        }
    }

    /// Object index at the agent's cell, if it is still there.
    pub fn object_here(&self, s: &GridState) -> Option<usize> {
        let (x, y) = (s.agent.0 as usize, s.agent.1 as usize);
        self.object_at(x, y).filter(|&i| !s.is_removed(i))
    }

    /// Deterministic successor. Invalid actions leave the state unchanged.
    pub fn transition(&self, s: &GridState, action: Action) -> GridState {
        let (x, y) = (s.agent.0 as isize, s.agent.1 as isize);
        let (dx, dy) = match action {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Toggle => return self.toggle(s),
        };
        let (nx, ny) = (x + dx, y + dy);
        if nx < 0 || ny < 0 || nx as usize >= self.width || ny as usize >= self.height {
            return *s;
        }
        if !self.passable(s, nx as usize, ny as usize) {
            return *s;
        }
        let mut next = *s;
        next.agent = (nx as u8, ny as u8);
        next
    }

    fn toggle(&self, s: &GridState) -> GridState {
        let mut next = *s;
        let Some(obj) = self.object_here(s) else {
            if let Some(rule) = self.rules.crafting.iter().find(|r| r.station.is_none() && self.can_craft(s, r)) {
                apply_craft(&mut next, rule);
            }
            return next;
        };
        let kind = self.objects[obj].kind;
        if let Some(item) = kind.pickup() {
            if s.inventory_size() < self.capacity {
                next.removed |= 1 << obj;
                next.inventory[item.index()] += 1;
            }
            return next;
        }
        if kind == ObjectKind::Switch {
            next.toggled |= 1 << obj;
            return next;
        }
        if let Some(rule) = self.rules.mining.iter().find(|r| r.resource == kind) {
            let tool_ok = rule.tool.map_or(true, |t| s.has(t));
            if tool_ok && s.inventory_size() < self.capacity {
                next.removed |= 1 << obj;
                next.inventory[rule.yields.index()] += 1;
            }
            return next;
        }
        if let Some(rule) = self
            .rules
            .crafting
            .iter()
            .find(|r| r.station == Some(kind) && self.can_craft(s, r))
        {
            apply_craft(&mut next, rule);
        }
        next
    }

    fn can_craft(&self, s: &GridState, rule: &CraftingRule) -> bool {
        if rule.tool.is_some_and(|t| !s.has(t)) {
            return false;
        }
        let mut need = [0u8; ITEM_COUNT];
        for item in &rule.ingredients {
            need[item.index()] += 1;
        }
        if need.iter().zip(&s.inventory).any(|(n, have)| n > have) {
            return false;
        }
        s.inventory_size() + 1 <= self.capacity + rule.ingredients.len()
    }

    /// Ground-truth test for a registered subgoal.
    pub fn goal_holds(&self, subgoal: usize, s: &GridState) -> bool {
        match self.rules.subgoals[subgoal].predicate {
            GoalPredicate::Has(item) => s.has(item),
            GoalPredicate::SwitchOn => s.toggled != 0,
        }
    }

    /// Every state reachable from `start`, in breadth-first order.
    pub fn reachable_states(&self, start: GridState, limit: usize) -> Vec<GridState> {
        let mut seen = std::collections::HashSet::new();
        let mut out = vec![start];
        seen.insert(start);
        let mut head = 0;
        while head < out.len() && out.len() < limit {
            let s = out[head];
            head += 1;
            for &a in Action::ALL {
                let n = self.transition(&s, a);
                if seen.insert(n) {
                    out.push(n);
                }
            }
        }
        out
    }

    fn render_rows(&self, state: Option<&GridState>) -> Vec<String> {
        (0..self.height)
            .map(|y| {
                (0..self.width)
                    .map(|x| {
                        if state.is_some_and(|s| s.agent == (x as u8, y as u8)) {
                            return '@';
                        }
                        if let Some(i) = self.object_at(x, y) {
                            if state.map_or(true, |s| !s.is_removed(i)) {
                                return self.objects[i].kind.glyph();
                            }
                        }
                        match self.terrain(x, y) {
                            Terrain::Floor => '.',
                            Terrain::Wall => '#',
                            Terrain::River => '~',
                            Terrain::Door => '+',
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// ASCII picture of a state.
    pub fn render(&self, s: &GridState) -> String {
        let mut out = self.render_rows(Some(s)).join("\n");
        out.push('\n');
        out
    }

    /// The first state with the agent's route drawn over it: `S` marks the
    /// start, `@` the end and `*` floor cells passed through.
    pub fn render_path(&self, states: &[GridState]) -> String {
        let Some(first) = states.first() else {
            return String::new();
        };
        let mut rows: Vec<Vec<char>> = self.render_rows(None).iter().map(|r| r.chars().collect()).collect();
        for s in states {
            let (x, y) = (s.agent.0 as usize, s.agent.1 as usize);
            if rows[y][x] == '.' {
                rows[y][x] = '*';
            }
        }
        let (sx, sy) = first.agent;
        rows[sy as usize][sx as usize] = 'S';
        let (ex, ey) = states[states.len() - 1].agent;
        rows[ey as usize][ex as usize] = '@';
        let mut out: String = rows
            .into_iter()
            .map(|r| r.into_iter().collect::<String>())
            .collect::<Vec<_>>()
            .join("\n");
        out.push('\n');
        out
    }
}

fn apply_craft(s: &mut GridState, rule: &CraftingRule) {
    for item in &rule.ingredients {
        s.inventory[item.index()] -= 1;
    }
    s.inventory[rule.output.index()] += 1;
}

/// Dynamic part of the world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridState {
    pub agent: (u8, u8),
    pub inventory: [u8; ITEM_COUNT],
    /// Bit `i` set once object `i` was picked up or mined.
    pub removed: u64,
    /// Bit `i` set once switch `i` was toggled.
    pub toggled: u64,
}

impl GridState {
    pub fn has(&self, item: Item) -> bool {
        self.inventory[item.index()] > 0
    }

    pub fn count(&self, item: Item) -> u8 {
        self.inventory[item.index()]
    }

    pub fn inventory_size(&self) -> usize {
        self.inventory.iter().map(|&c| c as usize).sum()
    }

    pub fn is_removed(&self, object: usize) -> bool {
        self.removed & (1 << object) != 0
    }
}

pub fn step_cost(_state: &GridState, _action: Action) -> f64 {
    STEP_COST
}

/// Boolean predicate for subgoal `o` in `world`.
pub fn oracle_goal<'a>(
    o: &SubgoalName,
    world: &'a WorldConfig,
) -> Result<impl Fn(&GridState) -> bool + 'a, EnvError> {
    let idx = world.subgoal_index(o)?;
    Ok(move |s: &GridState| world.goal_holds(idx, s))
}

/// Number of features produced by [`features`].
pub const FEATURE_COUNT: usize = ITEM_COUNT + 2 * KIND_COUNT + 2;

/// Binary state description, one bit per feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FeatureVector(u64);

impl FeatureVector {
    pub fn get(&self, i: usize) -> bool {
        self.0 & (1 << i) != 0
    }

    pub fn active(&self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                return None;
            }
            let i = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            Some(i)
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (0..FEATURE_COUNT).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect()
    }

    pub fn bits(&self) -> u64 {
        self.0
    }

    fn set(&mut self, i: usize) {
        self.0 |= 1 << i;
    }
}

/// Feature names in index order.
pub fn feature_schema() -> Vec<String> {
    let mut names = Vec::with_capacity(FEATURE_COUNT);
    names.extend(Item::ALL.iter().map(|i| format!("inv:{i}")));
    names.extend(ObjectKind::ALL.iter().map(|k| format!("map:{k}")));
    names.extend(ObjectKind::ALL.iter().map(|k| format!("here:{k}")));
    names.push("switch-on".into());
    names.push("door-open".into());
    names
}

pub fn features(s: &GridState, world: &WorldConfig) -> FeatureVector {
    let mut f = FeatureVector::default();
    for (i, &c) in s.inventory.iter().enumerate() {
        if c > 0 {
            f.set(i);
        }
    }
    for (i, p) in world.objects.iter().enumerate() {
        if !s.is_removed(i) {
            f.set(ITEM_COUNT + p.kind.index());
        }
    }
    if let Some(i) = world.object_here(s) {
        f.set(ITEM_COUNT + KIND_COUNT + world.objects[i].kind.index());
    }
    if s.toggled != 0 {
        f.set(ITEM_COUNT + 2 * KIND_COUNT);
    }
    if world.doors_open(s) {
        f.set(ITEM_COUNT + 2 * KIND_COUNT + 1);
    }
    f
}
