//! Seeded two-lane platformer gridworlds (GetOut-mini, Loot-mini).
//!
//! The agent walks along the ground lane (y = 0) and can jump to the upper
//! lane. Objects within Chebyshev distance 1 of the agent are in reach.
//! Subtasks are completed in order; only objects of the first unachieved
//! subtask can be picked up, and pickups happen at the end of a step for the
//! objects that were eligible when the step began. Picked objects are carried
//! and move with the agent. Doors are never carried: reaching one completes
//! its subtask.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{GroundAtom, PredicateSig, SymbolicState, Vocabulary};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("step called on a terminal state")]
    SteppedAfterTerminal,
}

pub const AGENT: &str = "agent";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    GetOut,
    Loot,
}

impl EnvName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::GetOut => "getout",
            EnvName::Loot => "loot",
        }
    }
}

/// Which predicates `symbolize` emits. `Ablated` drops `have` and `picked`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabularyMode {
    #[default]
    Full,
    Ablated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Jump,
    MoveLeft,
    MoveRight,
    Noop,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Jump, Action::MoveLeft, Action::MoveRight, Action::Noop];

    pub fn name(self) -> &'static str {
        match self {
            Action::Jump => "jump",
            Action::MoveLeft => "move_left",
            Action::MoveRight => "move_right",
            Action::Noop => "noop",
        }
    }

    pub fn from_name(name: &str) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub kind: String,
    pub pos: [i32; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskSpec {
    pub id: String,
    pub objects: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConstants {
    pub step_penalty: f64,
    pub subtask: f64,
    pub success: f64,
    pub failure: f64,
}

impl Default for RewardConstants {
    fn default() -> Self {
        RewardConstants {
            step_penalty: -0.02,
            subtask: 1.0,
            success: 20.0,
            failure: -10.0,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub env_name: EnvName,
    #[serde(default)]
    pub vocabulary: VocabularyMode,
    pub grid_width: i32,
    pub grid_height: i32,
    pub agent_start: [i32; 2],
    pub object_layout: Vec<ObjectSpec>,
    pub subtask_spec: Vec<SubtaskSpec>,
    #[serde(default)]
    pub reward_constants: RewardConstants,
    pub max_steps: u32,
    /// Permute the occupied columns (agent start included) on every reset.
    #[serde(default = "default_true")]
    pub shuffle_layout: bool,
    /// Whether the planted subtask conjunctions may be used as ground truth.
    #[serde(default = "default_true")]
    pub declare_ground_truth: bool,
    #[serde(default)]
    pub seed: u64,
}

/// Kinds that are reached rather than carried.
pub fn is_reach_kind(kind: &str) -> bool {
    kind == "door"
}

fn obj(name: &str, kind: &str, x: i32, y: i32) -> ObjectSpec {
    ObjectSpec {
        name: name.into(),
        kind: kind.into(),
        pos: [x, y],
    }
}

fn subtask(id: &str, objects: &[&str]) -> SubtaskSpec {
    SubtaskSpec {
        id: id.into(),
        objects: objects.iter().map(|s| s.to_string()).collect(),
    }
}

impl EnvConfig {
    /// Two coins (stacked), a flag on the upper lane, a blue key, a red key
    /// that is never required, and the exit door.
    pub fn getout_mini() -> Self {
        EnvConfig {
            env_name: EnvName::GetOut,
            vocabulary: VocabularyMode::Full,
            grid_width: 12,
            grid_height: 2,
            agent_start: [0, 0],
            object_layout: vec![
                obj("coin1", "coin", 3, 0),
                obj("coin2", "coin", 3, 1),
                obj("flag", "flag", 5, 1),
                obj("blue_key", "key", 7, 0),
                obj("red_key", "key", 9, 0),
                obj("door", "door", 11, 0),
            ],
            subtask_spec: vec![
                subtask("coins", &["coin1", "coin2"]),
                subtask("flag", &["flag"]),
                subtask("blue_key", &["blue_key"]),
                subtask("door", &["door"]),
            ],
            reward_constants: RewardConstants::default(),
            max_steps: 60,
            shuffle_layout: true,
            declare_ground_truth: true,
            seed: 0,
        }
    }

    /// GetOut-mini observed through the reduced predicate set.
    pub fn getout_star() -> Self {
        EnvConfig {
            vocabulary: VocabularyMode::Ablated,
            ..EnvConfig::getout_mini()
        }
    }

    /// Two key/chest pairs; each pair is one subtask.
    pub fn loot_mini() -> Self {
        EnvConfig {
            env_name: EnvName::Loot,
            vocabulary: VocabularyMode::Full,
            grid_width: 10,
            grid_height: 2,
            agent_start: [0, 0],
            object_layout: vec![
                obj("key1", "key", 3, 0),
                obj("chest1", "chest", 3, 1),
                obj("key2", "key", 7, 0),
                obj("chest2", "chest", 7, 1),
            ],
            subtask_spec: vec![
                subtask("pair1", &["key1", "chest1"]),
                subtask("pair2", &["key2", "chest2"]),
            ],
            reward_constants: RewardConstants::default(),
            max_steps: 40,
            shuffle_layout: true,
            declare_ground_truth: true,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        EnvConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.grid_width < 1 || self.grid_height < 1 {
            return bad("grid dimensions must be positive".into());
        }
        if self.max_steps < 1 {
            return bad("max_steps must be at least 1".into());
        }
        if self.subtask_spec.is_empty() {
            return bad("subtask_spec is empty".into());
        }
        let in_bounds =
            |p: [i32; 2]| (0..self.grid_width).contains(&p[0]) && (0..self.grid_height).contains(&p[1]);
        if !in_bounds(self.agent_start) {
            return bad(format!("agent start {:?} out of bounds", self.agent_start));
        }
        let mut names = BTreeSet::new();
        for o in &self.object_layout {
            if !in_bounds(o.pos) {
                return bad(format!("object `{}` at {:?} out of bounds", o.name, o.pos));
            }
            if o.name == AGENT || !names.insert(o.name.as_str()) {
                return bad(format!("duplicate or reserved object name `{}`", o.name));
            }
            if o.pos[0] == self.agent_start[0] {
                return bad(format!("object `{}` shares the agent's start column", o.name));
            }
        }
        let mut required = BTreeSet::new();
        for st in &self.subtask_spec {
            if st.objects.is_empty() {
                return bad(format!("subtask `{}` has no objects", st.id));
            }
            for name in &st.objects {
                if !names.contains(name.as_str()) {
                    return bad(format!("subtask `{}` names unknown object `{name}`", st.id));
                }
                if !required.insert(name.as_str()) {
                    return bad(format!("object `{name}` required by two subtasks"));
                }
            }
        }
        Ok(())
    }

    fn kinds(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.object_layout.iter().map(|o| o.kind.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    fn carried_required(&self) -> BTreeSet<&str> {
        self.subtask_spec
            .iter()
            .flat_map(|s| &s.objects)
            .filter(|n| !is_reach_kind(self.kind_of(n)))
            .map(String::as_str)
            .collect()
    }

    fn kind_of(&self, name: &str) -> &str {
        self.object_layout
            .iter()
            .find(|o| o.name == name)
            .map(|o| o.kind.as_str())
            .unwrap_or("")
    }
}

/// Predicate vocabulary emitted by `symbolize` for this configuration.
pub fn vocabulary(config: &EnvConfig) -> Vocabulary {
    let mut preds = vec![
        PredicateSig::new("type", &["object", "kind"]),
        PredicateSig::new("closeby", &["agent", "object"]),
        PredicateSig::new("on_left", &["agent", "object"]),
        PredicateSig::new("on_right", &["agent", "object"]),
        PredicateSig::new("at_door", &["agent"]),
        PredicateSig::new("all_collected", &["agent"]),
    ];
    if config.vocabulary == VocabularyMode::Full {
        preds.push(PredicateSig::new("have", &["agent", "object"]));
        preds.push(PredicateSig::new("picked", &["object"]));
    }
    let mut constants = std::collections::BTreeMap::new();
    constants.insert("agent".to_string(), vec![AGENT.to_string()]);
    constants.insert(
        "object".to_string(),
        config.object_layout.iter().map(|o| o.name.clone()).collect(),
    );
    constants.insert("kind".to_string(), config.kinds());
    let actions = Action::ALL
        .iter()
        .map(|a| PredicateSig::new(a.name(), &["agent"]))
        .collect();
    Vocabulary::new(preds, constants, actions).expect("environment vocabulary is well formed")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectState {
    pub name: String,
    pub kind: String,
    pub pos: [i32; 2],
    pub carried: bool,
    pub reached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Terminal {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub config: Arc<EnvConfig>,
    pub agent_pos: [i32; 2],
    pub objects: Vec<ObjectState>,
    /// Ids of completed subtasks.
    pub achieved: BTreeSet<String>,
    pub steps_elapsed: u32,
    pub terminal: Option<Terminal>,
}

fn chebyshev(a: [i32; 2], b: [i32; 2]) -> i32 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

impl EnvState {
    /// Index of the first unachieved subtask.
    pub fn progress(&self) -> usize {
        self.config
            .subtask_spec
            .iter()
            .take_while(|s| self.achieved.contains(&s.id))
            .count()
    }

    pub fn object(&self, name: &str) -> Option<&ObjectState> {
        self.objects.iter().find(|o| o.name == name)
    }

    fn done(&self, name: &str) -> bool {
        self.object(name).map(|o| o.carried || o.reached).unwrap_or(false)
    }

    /// Objects that would be picked up or reached if in reach right now.
    pub fn eligible(&self) -> Vec<&ObjectState> {
        match self.config.subtask_spec.get(self.progress()) {
            Some(st) => st
                .objects
                .iter()
                .filter(|n| !self.done(n))
                .filter_map(|n| self.object(n))
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn in_reach(&self, o: &ObjectState) -> bool {
        chebyshev(self.agent_pos, o.pos) <= 1
    }
}

/// Initial state: layout from the config, columns permuted by `config.seed`
/// when shuffling is enabled.
pub fn reset(config: &EnvConfig) -> Result<EnvState, EnvError> {
    config.validate()?;
    let mut agent = config.agent_start;
    let mut objects: Vec<ObjectState> = config
        .object_layout
        .iter()
        .map(|o| ObjectState {
            name: o.name.clone(),
            kind: o.kind.clone(),
            pos: o.pos,
            carried: false,
            reached: false,
        })
        .collect();
    if config.shuffle_layout {
        let mut columns: Vec<i32> = objects.iter().map(|o| o.pos[0]).collect();
        columns.push(agent[0]);
        columns.sort_unstable();
        columns.dedup();
        let mut permuted = columns.clone();
        permuted.shuffle(&mut seed::rng(config.seed));
        let remap = |x: i32| permuted[columns.binary_search(&x).expect("known column")];
        agent[0] = remap(agent[0]);
        for o in &mut objects {
            o.pos[0] = remap(o.pos[0]);
        }
    }
    Ok(EnvState {
        config: Arc::new(config.clone()),
        agent_pos: agent,
        objects,
        achieved: BTreeSet::new(),
        steps_elapsed: 0,
        terminal: None,
    })
}

/// Initial state with the first `completed` subtasks already achieved.
pub fn reset_with_progress(config: &EnvConfig, completed: usize) -> Result<EnvState, EnvError> {
    let mut state = reset(config)?;
    let done: Vec<SubtaskSpec> = config.subtask_spec.iter().take(completed).cloned().collect();
    for st in &done {
        for name in &st.objects {
            let agent = state.agent_pos;
            if let Some(o) = state.objects.iter_mut().find(|o| &o.name == name) {
                if is_reach_kind(&o.kind) {
                    o.reached = true;
                } else {
                    o.carried = true;
                    o.pos = agent;
                }
            }
        }
        state.achieved.insert(st.id.clone());
    }
    if state.achieved.len() == config.subtask_spec.len() {
        state.terminal = Some(Terminal::Success);
    }
    Ok(state)
}

/// Advance one step. Returns the next state, the step reward and whether
/// the episode ended.
pub fn step(state: &EnvState, action: Action) -> Result<(EnvState, f64, bool), EnvError> {
    if state.terminal.is_some() {
        return Err(EnvError::SteppedAfterTerminal);
    }
    let cfg = state.config.clone();
    let rewards = cfg.reward_constants;
    let eligible: Vec<String> = state.eligible().iter().map(|o| o.name.clone()).collect();
    let mut next = state.clone();
    let [mut x, mut y] = next.agent_pos;
    match action {
        Action::MoveLeft => {
            x = (x - 1).max(0);
            y = (y - 1).max(0);
        }
        Action::MoveRight => {
            x = (x + 1).min(cfg.grid_width - 1);
            y = (y - 1).max(0);
        }
        Action::Jump => y = (y + 1).min(cfg.grid_height - 1),
        Action::Noop => y = (y - 1).max(0),
    }
    next.agent_pos = [x, y];
    next.steps_elapsed += 1;
    let mut reward = rewards.step_penalty;

    for o in next.objects.iter_mut() {
        if o.carried {
            o.pos = [x, y];
        } else if eligible.contains(&o.name) && chebyshev([x, y], o.pos) <= 1 {
            if is_reach_kind(&o.kind) {
                o.reached = true;
            } else {
                o.carried = true;
                o.pos = [x, y];
            }
        }
    }
    if let Some(current) = cfg.subtask_spec.get(state.progress()) {
        if current.objects.iter().all(|n| next.done(n)) {
            next.achieved.insert(current.id.clone());
            if next.achieved.len() == cfg.subtask_spec.len() {
                next.terminal = Some(Terminal::Success);
                reward += rewards.success;
            } else {
                reward += rewards.subtask;
            }
        }
    }
    if next.terminal.is_none() && next.steps_elapsed >= cfg.max_steps {
        next.terminal = Some(Terminal::Failure);
        reward += rewards.failure;
    }
    let done = next.terminal.is_some();
    Ok((next, reward, done))
}

/// Ground atoms describing `state`.
pub fn symbolize(state: &EnvState) -> SymbolicState {
    let cfg = &state.config;
    let full = cfg.vocabulary == VocabularyMode::Full;
    let mut atoms = BTreeSet::new();
    let [ax, _] = state.agent_pos;
    let eligible: Vec<&str> = state.eligible().iter().map(|o| o.name.as_str()).collect();
    for o in &state.objects {
        atoms.insert(GroundAtom::new("type", &[&o.name, &o.kind]));
        if o.carried {
            atoms.insert(GroundAtom::new("closeby", &[AGENT, &o.name]));
            if full {
                atoms.insert(GroundAtom::new("have", &[AGENT, &o.name]));
                atoms.insert(GroundAtom::new("picked", &[&o.name]));
            }
            continue;
        }
        // A locked door cannot be reached, and an object that cannot be
        // picked up yet is not `closeby`.
        let open = o.reached || eligible.contains(&o.name.as_str());
        if is_reach_kind(&o.kind) && open && state.in_reach(o) {
            atoms.insert(GroundAtom::new("closeby", &[AGENT, &o.name]));
            atoms.insert(GroundAtom::new("at_door", &[AGENT]));
        }
        if ax < o.pos[0] {
            atoms.insert(GroundAtom::new("on_left", &[AGENT, &o.name]));
        } else if ax > o.pos[0] {
            atoms.insert(GroundAtom::new("on_right", &[AGENT, &o.name]));
        }
    }
    let required = cfg.carried_required();
    if required
        .iter()
        .all(|n| state.object(n).map(|o| o.carried).unwrap_or(false))
    {
        atoms.insert(GroundAtom::new("all_collected", &[AGENT]));
    }
    SymbolicState { atoms }
}

/// The conjunction that holds, independent of layout, right after each
/// subtask is completed: static type atoms, everything about carried
/// objects, `all_collected` once every carried requirement is held, and the
/// reach atoms of a reach subtask.
pub fn planted_conjunctions(config: &EnvConfig) -> Vec<BTreeSet<GroundAtom>> {
    let full = config.vocabulary == VocabularyMode::Full;
    let required = config.carried_required();
    let mut carried: BTreeSet<&str> = BTreeSet::new();
    let mut out = Vec::new();
    for st in &config.subtask_spec {
        let mut atoms: BTreeSet<GroundAtom> = config
            .object_layout
            .iter()
            .map(|o| GroundAtom::new("type", &[&o.name, &o.kind]))
            .collect();
        for name in &st.objects {
            if is_reach_kind(config.kind_of(name)) {
                atoms.insert(GroundAtom::new("closeby", &[AGENT, name]));
                if config.kind_of(name) == "door" {
                    atoms.insert(GroundAtom::new("at_door", &[AGENT]));
                }
            } else {
                carried.insert(name);
            }
        }
        for name in &carried {
            atoms.insert(GroundAtom::new("closeby", &[AGENT, name]));
            if full {
                atoms.insert(GroundAtom::new("have", &[AGENT, name]));
                atoms.insert(GroundAtom::new("picked", &[name]));
            }
        }
        if required.iter().all(|n| carried.contains(n)) {
            atoms.insert(GroundAtom::new("all_collected", &[AGENT]));
        }
        out.push(atoms);
    }
    out
}

/// Greedy action toward the nearest eligible object.
pub fn scripted_action(state: &EnvState) -> Action {
    let [ax, ay] = state.agent_pos;
    let target = state
        .eligible()
        .into_iter()
        .min_by_key(|o| ((o.pos[0] - ax).abs(), o.name.clone()));
    match target {
        Some(o) if o.pos[0] > ax => Action::MoveRight,
        Some(o) if o.pos[0] < ax => Action::MoveLeft,
        Some(o) if o.pos[1] - ay > 1 => Action::Jump,
        _ => Action::Noop,
    }
}
