//! MiniHouse: a deterministic text-world household simulator.
//!
//! Six task families mirror the usual household benchmark categories. Each house
//! keeps every object at a persistent "home" receptacle, so experience gathered in
//! one episode (where the apple lives) transfers to later episodes in the same
//! house, while a fresh house has to be explored.
//!
//! Action grammar (one action per step, lowercase, extra whitespace ignored):
//!
//! ```text
//! goto <location>          take <object>          put <object> [in|on] <location>
//! clean <object>           heat <object>          cool <object>
//! examine <object>
//! ```
//!
//! `clean` needs the object in hand at the sinkbasin, `heat` at the microwave,
//! `cool` at the fridge, `examine` at the desk (where the desklamp is). Anything
//! that does not parse or whose preconditions fail is a no-op that still consumes
//! a step and yields `nothing happens.`

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOCATIONS: [&str; 7] =
    ["countertop", "cabinet", "drawer", "fridge", "microwave", "sinkbasin", "desk"];
pub const OBJECTS: [&str; 8] = ["apple", "egg", "potato", "tomato", "mug", "cup", "plate", "book"];
/// Receptacles an object can live in between episodes.
pub const STORAGE: [&str; 5] = ["countertop", "cabinet", "drawer", "fridge", "desk"];
/// Receptacles a task may ask an object to be put in.
pub const TARGETS: [&str; 4] = ["countertop", "cabinet", "drawer", "desk"];

pub const DEFAULT_MAX_STEPS: u32 = 15;
pub const AGENT_MARK: &str = "agent";

const SINK: &str = "sinkbasin";
const HEATER: &str = "microwave";
const COOLER: &str = "fridge";
const LAMP: &str = "desk";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid task spec `{id}`: {msg}")]
    InvalidSpec { id: String, msg: String },
    #[error("unknown probe query: {0}")]
    UnknownQuery(String),
    #[error("catalog io: {0}")]
    Io(#[from] std::io::Error),
    #[error("catalog json: {0}")]
    Json(#[from] serde_json::Error),
}

fn loc_index(name: &str) -> Option<usize> {
    LOCATIONS.iter().position(|l| *l == name)
}

fn obj_index(name: &str) -> Option<usize> {
    OBJECTS.iter().position(|o| *o == name)
}

/// A grounded action over the fixed MiniHouse vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Goto(usize),
    Take(usize),
    Put(usize, usize),
    Clean(usize),
    Heat(usize),
    Cool(usize),
    Examine(usize),
}

impl Action {
    /// Parses the action grammar; `None` for anything outside it.
    pub fn parse(text: &str) -> Option<Action> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_ascii_lowercase())
            .collect();
        let w: Vec<&str> = words.iter().map(String::as_str).collect();
        match w.as_slice() {
            ["goto", l] | ["go", "to", l] => loc_index(l).map(Action::Goto),
            ["take", o] => obj_index(o).map(Action::Take),
            ["put", o, l] | ["put", o, "in" | "on", l] => Some(Action::Put(obj_index(o)?, loc_index(l)?)),
            ["clean", o] => obj_index(o).map(Action::Clean),
            ["heat", o] => obj_index(o).map(Action::Heat),
            ["cool", o] => obj_index(o).map(Action::Cool),
            ["examine", o] => obj_index(o).map(Action::Examine),
            _ => None,
        }
    }

    /// Every grounded action, in a fixed order that defines action ids.
    pub fn space() -> Vec<Action> {
        let mut out = Vec::new();
        out.extend((0..LOCATIONS.len()).map(Action::Goto));
        out.extend((0..OBJECTS.len()).map(Action::Take));
        for o in 0..OBJECTS.len() {
            out.extend((0..LOCATIONS.len()).map(|l| Action::Put(o, l)));
        }
        out.extend((0..OBJECTS.len()).map(Action::Clean));
        out.extend((0..OBJECTS.len()).map(Action::Heat));
        out.extend((0..OBJECTS.len()).map(Action::Cool));
        out.extend((0..OBJECTS.len()).map(Action::Examine));
        out
    }

    pub fn space_size() -> usize {
        let (l, o) = (LOCATIONS.len(), OBJECTS.len());
        l + o + o * l + 4 * o
    }

    /// Position of this action in [`Action::space`].
    pub fn id(&self) -> usize {
        let (l, o) = (LOCATIONS.len(), OBJECTS.len());
        match *self {
            Action::Goto(x) => x,
            Action::Take(x) => l + x,
            Action::Put(x, y) => l + o + x * l + y,
            Action::Clean(x) => l + o + o * l + x,
            Action::Heat(x) => l + o + o * l + o + x,
            Action::Cool(x) => l + o + o * l + 2 * o + x,
            Action::Examine(x) => l + o + o * l + 3 * o + x,
        }
    }

    pub fn from_id(id: usize) -> Option<Action> {
        Action::space().get(id).copied()
    }

    /// Number of distinct factors: 7 verbs, then objects, then locations.
    pub const FACTOR_COUNT: usize = 7 + OBJECTS.len() + LOCATIONS.len();

    /// Indices of the verb, object and location factors this action uses.
    pub fn factors(&self) -> Vec<usize> {
        let obj = |o: usize| 7 + o;
        let loc = |l: usize| 7 + OBJECTS.len() + l;
        match *self {
            Action::Goto(l) => vec![0, loc(l)],
            Action::Take(o) => vec![1, obj(o)],
            Action::Put(o, l) => vec![2, obj(o), loc(l)],
            Action::Clean(o) => vec![3, obj(o)],
            Action::Heat(o) => vec![4, obj(o)],
            Action::Cool(o) => vec![5, obj(o)],
            Action::Examine(o) => vec![6, obj(o)],
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Action::Goto(l) => write!(f, "goto {}", LOCATIONS[l]),
            Action::Take(o) => write!(f, "take {}", OBJECTS[o]),
            Action::Put(o, l) => write!(f, "put {} {}", OBJECTS[o], LOCATIONS[l]),
            Action::Clean(o) => write!(f, "clean {}", OBJECTS[o]),
            Action::Heat(o) => write!(f, "heat {}", OBJECTS[o]),
            Action::Cool(o) => write!(f, "cool {}", OBJECTS[o]),
            Action::Examine(o) => write!(f, "examine {}", OBJECTS[o]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    PickPlace,
    CleanPlace,
    HeatPlace,
    CoolPlace,
    ExamineLight,
    PickTwo,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 6] = [
        TaskFamily::PickPlace,
        TaskFamily::CleanPlace,
        TaskFamily::HeatPlace,
        TaskFamily::CoolPlace,
        TaskFamily::ExamineLight,
        TaskFamily::PickTwo,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskFamily::PickPlace => "pick_place",
            TaskFamily::CleanPlace => "clean_place",
            TaskFamily::HeatPlace => "heat_place",
            TaskFamily::CoolPlace => "cool_place",
            TaskFamily::ExamineLight => "examine_light",
            TaskFamily::PickTwo => "pick_two",
        }
    }

    /// Goal sentence for the family template.
    pub fn goal_text(&self, target: &TaskTarget) -> String {
        let o = &target.object;
        let r = target.receptacle.as_deref().unwrap_or("");
        match self {
            TaskFamily::PickPlace => format!("put some {o} in {r}"),
            TaskFamily::CleanPlace => format!("clean some {o} and put it in {r}"),
            TaskFamily::HeatPlace => format!("heat some {o} and put it in {r}"),
            TaskFamily::CoolPlace => format!("cool some {o} and put it in {r}"),
            TaskFamily::ExamineLight => format!("examine the {o} with the desklamp"),
            TaskFamily::PickTwo => {
                let o2 = target.second_object.as_deref().unwrap_or("");
                format!("put the {o} and the {o2} in {r}")
            }
        }
    }

    /// Subgoal plan for the family template.
    pub fn plan(&self, target: &TaskTarget) -> Vec<String> {
        let o = &target.object;
        let r = target.receptacle.as_deref().unwrap_or("");
        let put = format!("put {o} in {r}");
        match self {
            TaskFamily::PickPlace => vec![format!("find {o}"), format!("take {o}"), put],
            TaskFamily::CleanPlace => vec![format!("find {o}"), format!("take {o}"), format!("clean {o}"), put],
            TaskFamily::HeatPlace => vec![format!("find {o}"), format!("take {o}"), format!("heat {o}"), put],
            TaskFamily::CoolPlace => vec![format!("find {o}"), format!("take {o}"), format!("cool {o}"), put],
            TaskFamily::ExamineLight => vec![format!("find {o}"), format!("take {o}"), format!("examine {o}")],
            TaskFamily::PickTwo => {
                let o2 = target.second_object.as_deref().unwrap_or("");
                vec![
                    format!("find {o}"),
                    format!("take {o}"),
                    put,
                    format!("find {o2}"),
                    format!("take {o2}"),
                    format!("put {o2} in {r}"),
                ]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTarget {
    pub object: String,
    #[serde(default)]
    pub second_object: Option<String>,
    #[serde(default)]
    pub receptacle: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub house: String,
    pub family: TaskFamily,
    pub goal: String,
    pub subgoals: Vec<String>,
    pub target: TaskTarget,
    pub distractor_count: usize,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, house: &House, family: TaskFamily, target: TaskTarget, distractors: usize) -> Self {
        Self {
            id: id.into(),
            house: house.name.clone(),
            goal: family.goal_text(&target),
            subgoals: family.plan(&target),
            family,
            target,
            distractor_count: distractors,
        }
    }

    pub fn task_objects(&self) -> Vec<&str> {
        let mut v = vec![self.target.object.as_str()];
        if let Some(o) = &self.target.second_object {
            v.push(o.as_str());
        }
        v
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: &str| EnvError::InvalidSpec { id: self.id.clone(), msg: msg.into() };
        for o in self.task_objects() {
            obj_index(o).ok_or_else(|| bad("unknown object"))?;
        }
        let needs_receptacle = self.family != TaskFamily::ExamineLight;
        match (&self.target.receptacle, needs_receptacle) {
            (Some(r), true) => {
                loc_index(r).ok_or_else(|| bad("unknown receptacle"))?;
            }
            (None, true) => return Err(bad("missing receptacle")),
            _ => {}
        }
        if (self.family == TaskFamily::PickTwo) != self.target.second_object.is_some() {
            return Err(bad("second object only for pick_two"));
        }
        if self.distractor_count > OBJECTS.len() - self.task_objects().len() {
            return Err(bad("too many distractors"));
        }
        Ok(())
    }
}

/// A house: every object has a persistent home receptacle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct House {
    pub name: String,
    pub homes: IndexMap<String, String>,
}

impl House {
    pub fn generate(name: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let homes = OBJECTS
            .iter()
            .map(|o| (o.to_string(), STORAGE.choose(&mut rng).expect("storage").to_string()))
            .collect();
        Self { name: name.into(), homes }
    }

    pub fn home(&self, object: &str) -> Option<&str> {
        self.homes.get(object).map(String::as_str)
    }
}

/// Houses plus the task specs defined in them. Stored as one JSON document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub houses: Vec<House>,
    pub tasks: Vec<TaskSpec>,
}

impl Catalog {
    /// `tasks_per_house` specs per house cycling through the six families, with
    /// objects and targets drawn from `seed`.
    pub fn generate(house_names: &[&str], tasks_per_house: usize, distractors: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut houses = Vec::new();
        let mut tasks = Vec::new();
        for (hi, name) in house_names.iter().enumerate() {
            let house = House::generate(*name, seed.wrapping_mul(31).wrapping_add(hi as u64 + 1));
            for ti in 0..tasks_per_house {
                let family = TaskFamily::ALL[ti % TaskFamily::ALL.len()];
                let mut objs: Vec<&str> = OBJECTS.to_vec();
                objs.shuffle(&mut rng);
                let object = objs[0].to_string();
                let home = house.home(&object).unwrap_or("countertop").to_string();
                let receptacle = match family {
                    TaskFamily::ExamineLight => None,
                    _ => {
                        let options: Vec<&str> = TARGETS.iter().copied().filter(|t| *t != home).collect();
                        Some(options.choose(&mut rng).expect("target").to_string())
                    }
                };
                let second_object = (family == TaskFamily::PickTwo).then(|| objs[1].to_string());
                let target = TaskTarget { object, second_object, receptacle };
                let max_d = OBJECTS.len() - if family == TaskFamily::PickTwo { 2 } else { 1 };
                let id = format!("{name}-{ti:02}-{}", family.as_str());
                tasks.push(TaskSpec::new(id, &house, family, target, distractors.min(max_d)));
            }
            houses.push(house);
        }
        Self { houses, tasks }
    }

    pub fn house(&self, name: &str) -> Option<&House> {
        self.houses.iter().find(|h| h.name == name)
    }

    pub fn tasks_in<'a>(&'a self, house: &'a str) -> impl Iterator<Item = &'a TaskSpec> + 'a {
        self.tasks.iter().filter(move |t| t.house == house)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectState {
    /// Receptacle name, or [`AGENT_MARK`] while carried.
    pub location: String,
    pub clean: bool,
    pub hot: bool,
    pub cold: bool,
    pub examined: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub locations: Vec<String>,
    pub objects: IndexMap<String, ObjectState>,
    pub agent_location: String,
    pub inventory: Option<String>,
    pub step: u32,
    pub max_steps: u32,
    pub family: TaskFamily,
    pub goal: String,
    pub target: TaskTarget,
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: WorldState,
    pub observation: String,
    pub done: bool,
    pub success: bool,
    pub valid: bool,
}

/// Starts an episode with the default step budget.
pub fn reset(spec: &TaskSpec, house: &House, seed: u64) -> Result<(WorldState, String, Vec<String>), EnvError> {
    reset_with(spec, house, seed, DEFAULT_MAX_STEPS)
}

pub fn reset_with(
    spec: &TaskSpec,
    house: &House,
    seed: u64,
    max_steps: u32,
) -> Result<(WorldState, String, Vec<String>), EnvError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task_objs = spec.task_objects();
    let mut objects = IndexMap::new();
    for o in &task_objs {
        let home = house.home(o).unwrap_or("countertop");
        objects.insert(o.to_string(), fresh_object(home));
    }
    let mut others: Vec<&str> = OBJECTS.iter().copied().filter(|o| !task_objs.contains(o)).collect();
    others.shuffle(&mut rng);
    for o in others.into_iter().take(spec.distractor_count) {
        let loc = STORAGE.choose(&mut rng).expect("storage");
        objects.insert(o.to_string(), fresh_object(loc));
    }
    let start = LOCATIONS[rng.random_range(0..LOCATIONS.len())];
    let state = WorldState {
        locations: LOCATIONS.iter().map(|s| s.to_string()).collect(),
        objects,
        agent_location: start.to_string(),
        inventory: None,
        step: 0,
        max_steps,
        family: spec.family,
        goal: spec.goal.clone(),
        target: spec.target.clone(),
        done: false,
        success: false,
    };
    let obs = observe(&state, &format!("you wake up at the {start}."));
    Ok((state, obs, spec.subgoals.clone()))
}

fn fresh_object(loc: &str) -> ObjectState {
    ObjectState { location: loc.to_string(), clean: false, hot: false, cold: false, examined: false }
}

/// Observation text: feedback, task, location, visible objects, inventory.
pub fn observe(state: &WorldState, feedback: &str) -> String {
    let visible: Vec<&str> = state
        .objects
        .iter()
        .filter(|(_, s)| s.location == state.agent_location)
        .map(|(n, _)| n.as_str())
        .collect();
    let see = if visible.is_empty() { "nothing".to_string() } else { visible.join(", ") };
    let carry = match &state.inventory {
        None => "nothing".to_string(),
        Some(o) => {
            let s = &state.objects[o];
            let mut tags = Vec::new();
            if s.clean {
                tags.push("clean");
            }
            if s.hot {
                tags.push("hot");
            }
            if s.cold {
                tags.push("cold");
            }
            if s.examined {
                tags.push("examined");
            }
            if tags.is_empty() {
                o.clone()
            } else {
                format!("{o} ({})", tags.join(", "))
            }
        }
    };
    format!(
        "{feedback} task: {}. you are at {}. you see {see}. you carry {carry}.",
        state.goal, state.agent_location
    )
}

/// Success predicate, decidable from the world state alone.
pub fn is_success(state: &WorldState) -> bool {
    let at = |o: &str, r: &str| state.objects.get(o).is_some_and(|s| s.location == r);
    let t = &state.target;
    let r = t.receptacle.as_deref().unwrap_or("");
    let obj = state.objects.get(&t.object);
    match state.family {
        TaskFamily::PickPlace => at(&t.object, r),
        TaskFamily::CleanPlace => at(&t.object, r) && obj.is_some_and(|s| s.clean),
        TaskFamily::HeatPlace => at(&t.object, r) && obj.is_some_and(|s| s.hot),
        TaskFamily::CoolPlace => at(&t.object, r) && obj.is_some_and(|s| s.cold),
        TaskFamily::ExamineLight => obj.is_some_and(|s| s.examined),
        TaskFamily::PickTwo => {
            at(&t.object, r) && t.second_object.as_deref().is_some_and(|o2| at(o2, r))
        }
    }
}

/// One transition. Invalid or unparseable actions are no-ops that consume a step.
/// Once the episode is done the state is frozen.
pub fn step(state: &WorldState, action: &str) -> StepResult {
    if state.done {
        let obs = observe(state, "the episode is over.");
        return StepResult { state: state.clone(), observation: obs, done: true, success: state.success, valid: false };
    }
    let mut next = state.clone();
    let feedback = match Action::parse(action) {
        Some(a) => apply_action(&mut next, a),
        None => None,
    };
    let valid = feedback.is_some();
    let feedback = feedback.unwrap_or_else(|| "nothing happens.".to_string());
    next.step += 1;
    next.success = is_success(&next);
    next.done = next.success || next.step >= next.max_steps;
    let obs = observe(&next, &feedback);
    StepResult { done: next.done, success: next.success, state: next, observation: obs, valid }
}

fn apply_action(s: &mut WorldState, a: Action) -> Option<String> {
    let here = s.agent_location.clone();
    let holding = |s: &WorldState, o: &str| s.inventory.as_deref() == Some(o);
    match a {
        Action::Goto(l) => {
            s.agent_location = LOCATIONS[l].to_string();
            Some(format!("you arrive at the {}.", LOCATIONS[l]))
        }
        Action::Take(o) => {
            let name = OBJECTS[o];
            let ok = s.inventory.is_none() && s.objects.get(name).is_some_and(|st| st.location == here);
            ok.then(|| {
                s.objects[name].location = AGENT_MARK.to_string();
                s.inventory = Some(name.to_string());
                format!("you take the {name}.")
            })
        }
        Action::Put(o, l) => {
            let name = OBJECTS[o];
            let ok = holding(s, name) && LOCATIONS[l] == here;
            ok.then(|| {
                s.objects[name].location = here.clone();
                s.inventory = None;
                format!("you put the {name} in the {here}.")
            })
        }
        Action::Clean(o) => process(s, OBJECTS[o], SINK, |st| st.clean = true, "clean"),
        Action::Heat(o) => process(
            s,
            OBJECTS[o],
            HEATER,
            |st| {
                st.hot = true;
                st.cold = false;
            },
            "heat",
        ),
        Action::Cool(o) => process(
            s,
            OBJECTS[o],
            COOLER,
            |st| {
                st.cold = true;
                st.hot = false;
            },
            "cool",
        ),
        Action::Examine(o) => process(s, OBJECTS[o], LAMP, |st| st.examined = true, "examine"),
    }
}

fn process(
    s: &mut WorldState,
    name: &str,
    place: &str,
    f: impl FnOnce(&mut ObjectState),
    verb: &str,
) -> Option<String> {
    let ok = s.inventory.as_deref() == Some(name) && s.agent_location == place;
    ok.then(|| {
        f(&mut s.objects[name]);
        format!("you {verb} the {name}.")
    })
}

/// Verb of a plan subgoal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubgoalVerb {
    Find,
    Take,
    Clean,
    Heat,
    Cool,
    Put,
    Examine,
}

impl SubgoalVerb {
    pub const ALL: [SubgoalVerb; 7] = [
        SubgoalVerb::Find,
        SubgoalVerb::Take,
        SubgoalVerb::Clean,
        SubgoalVerb::Heat,
        SubgoalVerb::Cool,
        SubgoalVerb::Put,
        SubgoalVerb::Examine,
    ];

    pub fn index(&self) -> usize {
        SubgoalVerb::ALL.iter().position(|v| v == self).expect("verb")
    }

    /// Fixed station for processing verbs.
    pub fn station(&self) -> Option<&'static str> {
        match self {
            SubgoalVerb::Clean => Some(SINK),
            SubgoalVerb::Heat => Some(HEATER),
            SubgoalVerb::Cool => Some(COOLER),
            SubgoalVerb::Examine => Some(LAMP),
            _ => None,
        }
    }
}

/// A parsed plan subgoal such as `heat apple` or `put apple in countertop`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgoal {
    pub verb: SubgoalVerb,
    pub object: String,
    pub dest: Option<String>,
}

pub fn parse_subgoal(text: &str) -> Option<Subgoal> {
    let w: Vec<&str> = text.split_whitespace().collect();
    let verb = match *w.first()? {
        "find" => SubgoalVerb::Find,
        "take" => SubgoalVerb::Take,
        "clean" => SubgoalVerb::Clean,
        "heat" => SubgoalVerb::Heat,
        "cool" => SubgoalVerb::Cool,
        "put" => SubgoalVerb::Put,
        "examine" => SubgoalVerb::Examine,
        _ => return None,
    };
    let object = w.get(1)?.to_string();
    obj_index(&object)?;
    let dest = if verb == SubgoalVerb::Put {
        let d = w.last()?.to_string();
        loc_index(&d)?;
        Some(d)
    } else {
        None
    };
    Some(Subgoal { verb, object, dest })
}

/// Whether `sub` holds in `state`.
pub fn subgoal_satisfied(state: &WorldState, sub: &Subgoal) -> bool {
    let Some(o) = state.objects.get(&sub.object) else { return false };
    match sub.verb {
        SubgoalVerb::Find => o.location == state.agent_location || o.location == AGENT_MARK,
        SubgoalVerb::Take => o.location == AGENT_MARK,
        SubgoalVerb::Clean => o.clean,
        SubgoalVerb::Heat => o.hot,
        SubgoalVerb::Cool => o.cold,
        SubgoalVerb::Examine => o.examined,
        SubgoalVerb::Put => sub.dest.as_deref().is_some_and(|d| o.location == d),
    }
}

/// Privileged queries for teacher-side data generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProbeQuery {
    ObjectLocation(String),
    SubgoalSatisfied(String),
    Success,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProbeAnswer {
    Location(String),
    Flag(bool),
}

/// Read-only ground-truth accessor.
pub trait GroundTruth {
    fn probe(&self, query: &ProbeQuery) -> Result<ProbeAnswer, EnvError>;
}

impl GroundTruth for WorldState {
    fn probe(&self, query: &ProbeQuery) -> Result<ProbeAnswer, EnvError> {
        match query {
            ProbeQuery::ObjectLocation(o) => self
                .objects
                .get(o)
                .map(|s| ProbeAnswer::Location(s.location.clone()))
                .ok_or_else(|| EnvError::UnknownQuery(format!("object `{o}` not in this episode"))),
            ProbeQuery::SubgoalSatisfied(text) => {
                let sub = parse_subgoal(text)
                    .ok_or_else(|| EnvError::UnknownQuery(format!("subgoal `{text}`")))?;
                Ok(ProbeAnswer::Flag(subgoal_satisfied(self, &sub)))
            }
            ProbeQuery::Success => Ok(ProbeAnswer::Flag(is_success(self))),
        }
    }
}

/// Full plan for the task held by `state`.
pub fn plan_of(state: &WorldState) -> Vec<Subgoal> {
    state.family.plan(&state.target).iter().filter_map(|s| parse_subgoal(s)).collect()
}

/// The privileged expert: next action toward the first unsatisfied subgoal.
pub fn golden_action(state: &WorldState) -> Option<Action> {
    let sub = plan_of(state).into_iter().find(|s| !subgoal_satisfied(state, s))?;
    let o = obj_index(&sub.object)?;
    let goto = |loc: &str| loc_index(loc).map(Action::Goto);
    let here = state.agent_location.as_str();
    let obj_loc = state.objects.get(&sub.object)?.location.clone();
    match sub.verb {
        SubgoalVerb::Find | SubgoalVerb::Take => {
            if obj_loc == AGENT_MARK {
                return None;
            }
            if let Some(held) = &state.inventory {
                // free the hands first at a harmless spot
                return Some(Action::Put(obj_index(held)?, loc_index(here)?));
            }
            if obj_loc != here {
                goto(&obj_loc)
            } else if sub.verb == SubgoalVerb::Take {
                Some(Action::Take(o))
            } else {
                None
            }
        }
        SubgoalVerb::Clean | SubgoalVerb::Heat | SubgoalVerb::Cool | SubgoalVerb::Examine => {
            let station = sub.verb.station()?;
            if state.inventory.as_deref() != Some(sub.object.as_str()) {
                return if obj_loc != here { goto(&obj_loc) } else { Some(Action::Take(o)) };
            }
            if here != station {
                return goto(station);
            }
            Some(match sub.verb {
                SubgoalVerb::Clean => Action::Clean(o),
                SubgoalVerb::Heat => Action::Heat(o),
                SubgoalVerb::Cool => Action::Cool(o),
                _ => Action::Examine(o),
            })
        }
        SubgoalVerb::Put => {
            let dest = sub.dest.as_deref()?;
            if state.inventory.as_deref() != Some(sub.object.as_str()) {
                return if obj_loc != here { goto(&obj_loc) } else { Some(Action::Take(o)) };
            }
            if here != dest {
                goto(dest)
            } else {
                Some(Action::Put(o, loc_index(dest)?))
            }
        }
    }
}

/// Rolls the golden policy from a reset state; returns (obs, action) pairs and the final state.
pub fn golden_rollout(start: &WorldState, first_obs: &str) -> (Vec<(String, String)>, WorldState) {
    let mut state = start.clone();
    let mut obs = first_obs.to_string();
    let mut traj = Vec::new();
    while !state.done {
        let Some(a) = golden_action(&state) else { break };
        let text = a.to_string();
        let r = step(&state, &text);
        traj.push((obs, text));
        obs = r.observation;
        state = r.state;
    }
    (traj, state)
}

/// Stable fingerprint of a world state (FNV-1a over its JSON form).
pub fn fingerprint(state: &WorldState) -> u64 {
    let json = serde_json::to_string(state).expect("world state serializes");
    crate::text::fnv1a(json.as_bytes())
}

/// Uniformly random grounded action, used for exploration noise.
pub fn random_action(rng: &mut impl Rng) -> Action {
    let space = Action::space();
    space[rng.random_range(0..space.len())]
}
