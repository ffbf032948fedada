//! Local action planner: a closed-grammar parser from commands to
//! high-level plans, and executors that expand them into primitives.

use crate::env::{ActionCommand, Embodiment, Observation, Outcome, Verb, World};
use crate::geometry::{angle_diff, Vec2};
use crate::waypoints::{astar_with, edge_cost, path_cost, Mode, WaypointGraph, WaypointId};
use crate::world_model::{Category, EntityId};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::mpsc;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("empty command")]
    EmptyCommand,
    #[error("unparseable clause: {0:?}")]
    UnparseableClause(String),
    #[error("target not found: {0}")]
    TargetNotFound(String),
    #[error("no path to {0}")]
    NoPath(String),
    #[error("unknown verb {0}")]
    UnknownVerb(String),
    #[error("bad arguments for {verb}: {reason}")]
    BadArgs { verb: String, reason: String },
    #[error("navigation is not available to {0:?} bodies")]
    WrongEmbodiment(Embodiment),
    #[error("unknown agent {0}")]
    UnknownAgent(u64),
    #[error("external executor endpoint unavailable")]
    EndpointUnavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub verb: String,
    #[serde(default)]
    pub args: Map<String, Value>,
}

impl PlanStep {
    fn new(verb: &str) -> Self {
        Self { verb: verb.into(), args: Map::new() }
    }

    fn with(mut self, k: &str, v: Value) -> Self {
        self.args.insert(k.into(), v);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighLevelPlan {
    pub steps: Vec<PlanStep>,
    #[serde(default)]
    pub source_text: String,
}

/// How a plan names something in the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    Entity(u64),
    Waypoint { waypoint: WaypointId },
    Point { x: f64, y: f64 },
    Nearest { nearest: String },
}

/// Noun table for targets: noun -> (category, tag).
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub nouns: BTreeMap<String, (Category, Option<String>)>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut nouns = BTreeMap::new();
        let mut add = |n: &str, c: Category, t: Option<&str>| {
            nouns.insert(n.to_string(), (c, t.map(str::to_string)));
        };
        for n in ["chair", "bench", "cone"] {
            add(n, Category::UrbanProp, Some(n));
        }
        add("trash bin", Category::UrbanProp, Some("trash_bin"));
        add("bin", Category::UrbanProp, Some("trash_bin"));
        add("tree", Category::Vegetation, Some("tree"));
        add("car", Category::Vehicle, Some("car"));
        add("building", Category::Building, None);
        add("landmark", Category::Building, Some("landmark"));
        for n in ["house", "shop", "restaurant", "apartment", "office", "museum", "hospital"] {
            add(n, Category::Building, Some(n));
        }
        Self { nouns }
    }
}

/// Verbs that a plan passes through to the caller, e.g. the delivery economy.
pub const HOOK_VERBS: &[&str] = &[
    "bid_order",
    "pick_up_order",
    "deliver_order",
    "share_order",
    "cancel_share",
    "cancel_order",
    "go_to_meet_point",
    "purchase_scooter",
    "purchase_drinks",
    "adjust_speed",
];

fn split_clauses(text: &str) -> Vec<Vec<String>> {
    // Commas act as clause separators too.
    let marked = text.to_lowercase().replace([',', ';'], " then ");
    let mut out = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for w in marked.split_whitespace() {
        let w = w.trim_matches(|c: char| !c.is_alphanumeric() && c != '_');
        if w.is_empty() {
            continue;
        }
        if w == "and" || w == "then" {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            continue;
        }
        cur.push(w.to_string());
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn parse_target(words: &[String], vocab: &Vocabulary, clause: &str) -> Result<TargetSpec, PlanError> {
    let bad = || PlanError::UnparseableClause(clause.to_string());
    let words: Vec<&str> = words.iter().map(String::as_str).filter(|w| !matches!(*w, "the" | "a" | "an" | "nearest" | "closest")).collect();
    match words.as_slice() {
        ["waypoint", n] => Ok(TargetSpec::Waypoint { waypoint: WaypointId(n.parse().map_err(|_| bad())?) }),
        [.., n] if n.parse::<u64>().is_ok() && words.len() == 2 => {
            let noun = words[0];
            if noun != "entity" && !vocab.nouns.contains_key(noun) {
                return Err(bad());
            }
            Ok(TargetSpec::Entity(n.parse().unwrap()))
        }
        [] => Err(bad()),
        ws => {
            let noun = ws.join(" ");
            let noun = if vocab.nouns.contains_key(&noun) {
                noun
            } else {
                let singular = noun.strip_suffix('s').unwrap_or(&noun).to_string();
                if !vocab.nouns.contains_key(&singular) {
                    return Err(bad());
                }
                singular
            };
            Ok(TargetSpec::Nearest { nearest: noun })
        }
    }
}

fn target_json(t: &TargetSpec) -> Value {
    serde_json::to_value(t).expect("target serializes")
}

fn order_id(words: &[String], clause: &str) -> Result<u64, PlanError> {
    let n = match words {
        [o, n] if o == "order" => n,
        [n] => n,
        _ => return Err(PlanError::UnparseableClause(clause.into())),
    };
    n.parse().map_err(|_| PlanError::UnparseableClause(clause.into()))
}

/// Parses a command with the closed clause grammar. Clauses are split on
/// "and", "then" and commas.
pub fn parse(command: &str, vocab: &Vocabulary) -> Result<HighLevelPlan, PlanError> {
    if command.trim().is_empty() {
        return Err(PlanError::EmptyCommand);
    }
    let mut steps = Vec::new();
    for words in split_clauses(command) {
        let clause = words.join(" ");
        let ws: Vec<&str> = words.iter().map(String::as_str).collect();
        let nav_then = |verb: &str, rest: &[String], steps: &mut Vec<PlanStep>| -> Result<(), PlanError> {
            let t = target_json(&parse_target(rest, vocab, &clause)?);
            steps.push(PlanStep::new("navigate").with("target", t.clone()));
            if !verb.is_empty() {
                steps.push(PlanStep::new(verb).with("target", t));
            }
            Ok(())
        };
        match ws.as_slice() {
            ["go" | "walk" | "navigate" | "head" | "move", "to", ..] => nav_then("", &words[2..], &mut steps)?,
            ["sit", "on", ..] => {
                nav_then("", &words[2..], &mut steps)?;
                steps.push(PlanStep::new("sit_down"));
            }
            ["sit"] | ["sit", "down"] => steps.push(PlanStep::new("sit_down")),
            ["stand"] | ["stand", "up"] => steps.push(PlanStep::new("stand_up")),
            ["pick", "up", "order", _] => steps.push(PlanStep::new("pick_up_order").with("order", json!(order_id(&words[2..], &clause)?))),
            ["pick", "up", ..] => nav_then("pick_up", &words[2..], &mut steps)?,
            ["carry", ..] => nav_then("carry", &words[1..], &mut steps)?,
            ["put", "down"] | ["put", "it", "down"] => steps.push(PlanStep::new("put_down")),
            ["drop"] | ["drop", "it"] => steps.push(PlanStep::new("drop")),
            ["enter", ..] => nav_then("enter_car", &words[1..], &mut steps)?,
            ["get", "in" | "into", ..] => nav_then("enter_car", &words[2..], &mut steps)?,
            ["exit", "the", "car"] | ["exit", "car"] | ["get", "out", ..] => steps.push(PlanStep::new("exit_car")),
            ["open", ..] => nav_then("open_door", &words[1..], &mut steps)?,
            ["wave"] | ["wave", "hand"] | ["wave", "your", "hand"] => steps.push(PlanStep::new("wave_hand")),
            ["stop"] => steps.push(PlanStep::new("stop")),
            ["wait"] | ["do", "nothing"] => steps.push(PlanStep::new("do_nothing")),
            ["take", "photo" | "picture"] | ["take", "a", "photo" | "picture"] => steps.push(PlanStep::new("take_photo")),
            ["look", "up"] => steps.push(PlanStep::new("look_up")),
            ["look", "down"] => steps.push(PlanStep::new("look_down")),
            ["turn", dir] => {
                let theta = match *dir {
                    "left" => FRAC_PI_2,
                    "right" => -FRAC_PI_2,
                    "around" => -PI,
                    _ => return Err(PlanError::UnparseableClause(clause)),
                };
                steps.push(PlanStep::new("rotate").with("theta", json!(theta)));
            }
            ["step", "forward"] | ["move", "forward"] => steps.push(PlanStep::new("step_forward")),
            ["step", "back" | "backward"] | ["move", "back" | "backward"] => steps.push(PlanStep::new("step_backward")),
            ["move", "left"] | ["step", "left"] => steps.push(PlanStep::new("move_left")),
            ["move", "right"] | ["step", "right"] => steps.push(PlanStep::new("move_right")),
            ["ride", "scooter"] | ["ride", "the" | "a", "scooter"] => steps.push(PlanStep::new("ride_scooter")),
            ["evaluate"] => steps.push(PlanStep::new("evaluate")),
            ["deliver", ..] => steps.push(PlanStep::new("deliver_order").with("order", json!(order_id(&words[1..], &clause)?))),
            ["say", ..] if ws.len() > 1 => steps.push(PlanStep::new("converse").with("text", json!(words[1..].join(" ")))),
            _ => return Err(PlanError::UnparseableClause(clause)),
        }
    }
    if steps.is_empty() {
        return Err(PlanError::EmptyCommand);
    }
    Ok(HighLevelPlan { steps, source_text: command.to_string() })
}

/// A navigate action resolved to a waypoint chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NavLeg {
    pub goal: WaypointId,
    /// Entity the leg approaches; arriving within interaction range of it ends the leg.
    pub entity: Option<u64>,
    /// Waypoint chain from the leg's start to `goal`.
    pub hops: Vec<WaypointId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PlanAction {
    Navigate(NavLeg),
    Primitive(Verb),
    Hook { verb: String, args: Map<String, Value> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum ProgramStatus {
    Running,
    Done,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ActiveLeg {
    leg: NavLeg,
    /// Index in `leg.hops` of the waypoint being approached.
    next: usize,
    pending: VecDeque<Verb>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanProgram {
    pub agent_id: u64,
    pub queue: VecDeque<PlanAction>,
    pub status: ProgramStatus,
    active: Option<ActiveLeg>,
    awaiting_move: bool,
    pub replans: u32,
    best_remaining: u64,
    penalized: BTreeSet<WaypointId>,
    /// Waypoints reached so far, in order.
    pub visited: Vec<WaypointId>,
}

/// Replans allowed without progress before the program fails as stuck.
pub const REPLAN_BUDGET: u32 = 2;
pub const REPLAN_PENALTY: u64 = 10;

impl PlanProgram {
    pub fn new(agent_id: u64, queue: VecDeque<PlanAction>) -> Self {
        Self {
            agent_id,
            status: if queue.is_empty() { ProgramStatus::Done } else { ProgramStatus::Running },
            queue,
            active: None,
            awaiting_move: false,
            replans: 0,
            best_remaining: u64::MAX,
            penalized: BTreeSet::new(),
            visited: Vec::new(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.status != ProgramStatus::Running
    }

    /// Every navigate leg in the queue.
    pub fn legs(&self) -> impl Iterator<Item = &NavLeg> {
        self.queue.iter().filter_map(|a| match a {
            PlanAction::Navigate(l) => Some(l),
            _ => None,
        })
    }
}

/// Edge cost for agent navigation: obstacle-covered waypoints are removed
/// (except the goal) and penalized ones cost ten times more.
fn nav_cost<'a>(
    blocked: &'a BTreeSet<WaypointId>,
    penalized: &'a BTreeSet<WaypointId>,
    goal: WaypointId,
) -> impl Fn(WaypointId, WaypointId, f64) -> Option<u64> + 'a {
    move |_, v, len| {
        if v != goal && blocked.contains(&v) {
            return None;
        }
        let c = edge_cost(len);
        Some(if penalized.contains(&v) { c * REPLAN_PENALTY } else { c })
    }
}

/// Shortest agent path between two waypoints avoiding obstacle-covered ones.
pub fn nav_path(
    g: &WaypointGraph,
    blocked: &BTreeSet<WaypointId>,
    penalized: &BTreeSet<WaypointId>,
    from: WaypointId,
    to: WaypointId,
) -> Result<Vec<WaypointId>, PlanError> {
    astar_with(g, from, to, Mode::Pedestrian, nav_cost(blocked, penalized, to)).map_err(|e| PlanError::NoPath(e.to_string()))
}

/// Resolves a target to (goal waypoint, entity).
pub fn resolve_target(world: &World, from: Vec2, spec: &TargetSpec, vocab: &Vocabulary) -> Result<(WaypointId, Option<u64>), PlanError> {
    let g = &world.waypoints.fine;
    let ped = |w: &crate::waypoints::Waypoint| w.kind.mode() == Mode::Pedestrian;
    let near_entity = |id: u64| -> Result<(WaypointId, Option<u64>), PlanError> {
        let e = world.scene.get(EntityId(id)).ok_or_else(|| PlanError::TargetNotFound(format!("entity {id}")))?;
        let fp = e.footprint;
        let mut best: Option<(f64, WaypointId)> = None;
        for w in g.nodes().iter().filter(|w| ped(w)) {
            let d = fp.distance_to_point(w.position);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, w.id));
            }
        }
        let (_, w) = best.ok_or_else(|| PlanError::TargetNotFound("no walkable waypoints".into()))?;
        Ok((w, Some(id)))
    };
    match spec {
        TargetSpec::Entity(id) => {
            if let Some(a) = world.agents.get(id) {
                let w = g.nearest(a.pose.position(), Mode::Pedestrian).ok_or_else(|| PlanError::TargetNotFound(format!("agent {id}")))?;
                return Ok((w, None));
            }
            near_entity(*id)
        }
        TargetSpec::Waypoint { waypoint } => match g.get(*waypoint) {
            Some(w) if ped(w) => Ok((*waypoint, None)),
            _ => Err(PlanError::TargetNotFound(format!("waypoint {waypoint}"))),
        },
        TargetSpec::Point { x, y } => {
            g.nearest(Vec2::new(*x, *y), Mode::Pedestrian).map(|w| (w, None)).ok_or_else(|| PlanError::TargetNotFound("no walkable waypoints".into()))
        }
        TargetSpec::Nearest { nearest } => {
            let (cat, tag) = vocab.nouns.get(nearest).ok_or_else(|| PlanError::TargetNotFound(nearest.clone()))?;
            let e = world.scene.nearest(from, *cat, tag.as_deref()).map_err(|_| PlanError::TargetNotFound(nearest.clone()))?;
            near_entity(e.id.0)
        }
    }
}

fn target_arg(step: &PlanStep) -> Result<TargetSpec, PlanError> {
    let v = step.args.get("target").ok_or_else(|| PlanError::BadArgs { verb: step.verb.clone(), reason: "missing target".into() })?;
    serde_json::from_value(v.clone()).map_err(|e| PlanError::BadArgs { verb: step.verb.clone(), reason: e.to_string() })
}

/// Expands a plan for one agent: navigates become A* waypoint chains,
/// targets resolve to entity ids, everything else becomes a primitive or hook.
pub fn expand_rule_based(plan: &HighLevelPlan, world: &World, agent_id: u64, vocab: &Vocabulary) -> Result<PlanProgram, PlanError> {
    let agent = world.agents.get(&agent_id).ok_or(PlanError::UnknownAgent(agent_id))?;
    let g = &world.waypoints.fine;
    let mut here = agent.pose.position();
    let mut at_wp: Option<WaypointId> = None;
    let mut resolved: BTreeMap<String, (WaypointId, Option<u64>)> = BTreeMap::new();
    let mut queue = VecDeque::new();
    for step in &plan.steps {
        if step.verb == "navigate" {
            if agent.drives() || agent.embodiment == Embodiment::Vehicle {
                return Err(PlanError::WrongEmbodiment(agent.embodiment));
            }
            let spec = target_arg(step)?;
            let key = serde_json::to_string(&spec).expect("target serializes");
            let (goal, entity) = resolve_target(world, here, &spec, vocab)?;
            resolved.insert(key, (goal, entity));
            let start = match at_wp {
                Some(w) => w,
                None => start_waypoint(world, here, &BTreeSet::new()).ok_or_else(|| PlanError::NoPath("no start waypoint".into()))?,
            };
            let hops = nav_path(g, &world.static_blocked, &BTreeSet::new(), start, goal)?;
            here = g.position(goal);
            at_wp = Some(goal);
            queue.push_back(PlanAction::Navigate(NavLeg { goal, entity, hops }));
            continue;
        }
        if HOOK_VERBS.contains(&step.verb.as_str()) {
            queue.push_back(PlanAction::Hook { verb: step.verb.clone(), args: step.args.clone() });
            continue;
        }
        let mut obj = step.args.clone();
        if let Some(t) = obj.get("target").cloned() {
            if !t.is_u64() {
                let spec: TargetSpec =
                    serde_json::from_value(t).map_err(|e| PlanError::BadArgs { verb: step.verb.clone(), reason: e.to_string() })?;
                let key = serde_json::to_string(&spec).expect("target serializes");
                let entity = match resolved.get(&key) {
                    Some((_, e)) => *e,
                    None => resolve_target(world, here, &spec, vocab)?.1,
                };
                let id = entity.ok_or_else(|| PlanError::TargetNotFound(format!("{} needs an entity target", step.verb)))?;
                obj.insert("target".into(), json!(id));
            }
        }
        obj.insert("verb".into(), json!(step.verb));
        let verb: Verb = serde_json::from_value(Value::Object(obj)).map_err(|_| PlanError::UnknownVerb(step.verb.clone()))?;
        verb.validate().map_err(|e| PlanError::BadArgs { verb: step.verb.clone(), reason: e.to_string() })?;
        queue.push_back(PlanAction::Primitive(verb));
    }
    Ok(PlanProgram::new(agent_id, queue))
}

/// Waypoint an agent at `p` starts navigating from: the closest free one.
fn start_waypoint(world: &World, p: Vec2, avoid: &BTreeSet<WaypointId>) -> Option<WaypointId> {
    world.waypoints.fine.nearest_where(p, |w| w.kind.mode() == Mode::Pedestrian && !world.static_blocked.contains(&w.id) && !avoid.contains(&w.id))
}

/// One executor decision.
#[derive(Debug, Clone, PartialEq)]
pub enum ExecStep {
    Primitive(ActionCommand),
    /// A pass-through verb the caller executes.
    Hook {
        verb: String,
        args: Map<String, Value>,
    },
    Idle,
}

/// Primitives taking an agent from `pose` straight to `to`.
pub fn compile_hop(pos: Vec2, yaw: f64, to: Vec2, step: f64) -> Vec<Verb> {
    let d = to.sub(pos);
    let dist = d.length();
    if dist <= step / 2.0 + 1e-9 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let turn = angle_diff(d.angle(), yaw);
    if turn.abs() > 1e-12 {
        out.push(Verb::Rotate { theta: turn });
    }
    let k = (dist / step).round().max(1.0) as usize;
    out.extend(std::iter::repeat_n(Verb::StepForward, k));
    out
}

/// Emits the next primitive of a rule-based program, handling feedback from
/// the previous one. Blocked movement triggers a penalized replan; too many
/// replans without progress fail the program as stuck.
pub fn tick_executor(program: &mut PlanProgram, world: &World) -> ExecStep {
    let id = program.agent_id;
    let Some(agent) = world.agents.get(&id) else {
        program.status = ProgramStatus::Failed(format!("unknown agent {id}"));
        return ExecStep::Idle;
    };
    if program.awaiting_move {
        program.awaiting_move = false;
        if let Some(fb) = world.feedback.get(&id) {
            match fb.outcome {
                Outcome::Ok => {}
                Outcome::Invalid => {
                    program.status = ProgramStatus::Failed(format!("invalid: {}", fb.error.clone().unwrap_or_default()));
                    program.active = None;
                    return ExecStep::Idle;
                }
                Outcome::Blocked => {
                    if let Err(reason) = handle_block(program, world) {
                        program.status = ProgramStatus::Failed(reason);
                        program.active = None;
                        return ExecStep::Idle;
                    }
                }
            }
        }
    }
    let step = world.step_length(agent);
    let pos = agent.pose.position();
    let g = &world.waypoints.fine;
    // Each pass either emits, finishes a hop or leg, or consumes the queue.
    loop {
        if program.status != ProgramStatus::Running {
            return ExecStep::Idle;
        }
        if let Some(active) = program.active.as_mut() {
            if let Some(v) = active.pending.pop_front() {
                program.awaiting_move = v == Verb::StepForward;
                return ExecStep::Primitive(ActionCommand::new(id, v));
            }
            if active.next >= active.leg.hops.len() {
                program.active = None;
                continue;
            }
            let target = g.position(active.leg.hops[active.next]);
            let verbs = compile_hop(pos, agent.pose.yaw, target, step);
            if verbs.is_empty() {
                let reached = active.leg.hops[active.next];
                program.visited.push(reached);
                let remaining = path_cost(g, &active.leg.hops[active.next..]).unwrap_or(u64::MAX);
                if remaining < program.best_remaining {
                    program.best_remaining = remaining;
                    program.replans = 0;
                }
                active.next += 1;
                continue;
            }
            active.pending = verbs.into();
            continue;
        }
        match program.queue.pop_front() {
            None => {
                program.status = ProgramStatus::Done;
                return ExecStep::Idle;
            }
            Some(PlanAction::Navigate(leg)) => {
                program.best_remaining = u64::MAX;
                program.replans = 0;
                program.penalized.clear();
                // A leg whose entity is already within reach needs no walking.
                if entity_in_reach(world, id, leg.entity) {
                    continue;
                }
                program.active = Some(ActiveLeg { leg, next: 0, pending: VecDeque::new() });
            }
            Some(PlanAction::Primitive(v)) => return ExecStep::Primitive(ActionCommand::new(id, v)),
            Some(PlanAction::Hook { verb, args }) => return ExecStep::Hook { verb, args },
        }
    }
}

fn entity_in_reach(world: &World, agent: u64, entity: Option<u64>) -> bool {
    let (Some(e), Some(a)) = (entity.and_then(|e| world.scene.get(EntityId(e))), world.agents.get(&agent)) else {
        return false;
    };
    e.footprint.distance_to_point(a.pose.position()) <= world.config.interaction_range
}

fn handle_block(program: &mut PlanProgram, world: &World) -> Result<(), String> {
    let id = program.agent_id;
    let Some(active) = program.active.as_mut() else {
        return Ok(());
    };
    let last_hop = active.next + 1 >= active.leg.hops.len();
    let goal_near = world.agents[&id].pose.position().dist(world.waypoints.fine.position(active.leg.goal)) <= world.config.interaction_range;
    if goal_near || (last_hop && entity_in_reach(world, id, active.leg.entity)) {
        // Bumping into the target, or being blocked within reach of the
        // goal, counts as arrival.
        program.visited.push(active.leg.goal);
        program.active = None;
        return Ok(());
    }
    if program.replans >= REPLAN_BUDGET {
        return Err("stuck".into());
    }
    program.replans += 1;
    if let Some(&w) = active.leg.hops.get(active.next) {
        program.penalized.insert(w);
    }
    let pos = world.agents[&id].pose.position();
    // Steer around agents in the way, not just the blocked hop.
    let g = &world.waypoints.fine;
    for other in world.agents.values().filter(|o| o.id != id && o.pose.position().dist(pos) <= 3.0) {
        let q = other.pose.position();
        program.penalized.extend(g.nodes().iter().filter(|w| w.position.dist(q) <= 2.5 && w.position.dist(pos) > 0.5).map(|w| w.id));
    }
    let start = start_waypoint(world, pos, &program.penalized).ok_or("stuck")?;
    let goal = active.leg.goal;
    let hops = nav_path(&world.waypoints.fine, &world.static_blocked, &program.penalized, start, goal).map_err(|_| "stuck".to_string())?;
    active.leg.hops = hops;
    active.next = 0;
    active.pending.clear();
    Ok(())
}

/// Ticks `world` in lockstep until the program ends or `max_ticks` pass.
/// Other agents idle. Hooks are skipped.
pub fn run_program(program: &mut PlanProgram, world: &mut World, max_ticks: usize) -> Result<usize, crate::env::EnvError> {
    for t in 0..max_ticks {
        let cmd = loop {
            match tick_executor(program, world) {
                ExecStep::Primitive(c) => break Some(c),
                ExecStep::Hook { .. } => continue,
                ExecStep::Idle => break None,
            }
        };
        let Some(cmd) = cmd else {
            return Ok(t);
        };
        let cmds = world.fill_idle(&[cmd]);
        world.step_sync(&cmds)?;
    }
    // Let the executor see the last feedback.
    tick_executor(program, world);
    Ok(max_ticks)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecutorError {
    #[error("executor timed out")]
    Timeout,
    #[error("executor endpoint unavailable")]
    Unavailable,
}

/// A decision source outside the simulator, e.g. a model behind the protocol.
/// `Ok(None)` means the external party considers the task finished.
pub trait ExternalExecutor: Send {
    fn choose(&mut self, obs: &Observation, timeout: Duration) -> Result<Option<Verb>, ExecutorError>;
}

/// External executor fed over channels: observations go out, verbs come back.
pub struct ChannelExecutor {
    pub observations: mpsc::Sender<Observation>,
    pub choices: mpsc::Receiver<Option<Verb>>,
}

impl ExternalExecutor for ChannelExecutor {
    fn choose(&mut self, obs: &Observation, timeout: Duration) -> Result<Option<Verb>, ExecutorError> {
        self.observations.send(obs.clone()).map_err(|_| ExecutorError::Unavailable)?;
        match self.choices.recv_timeout(timeout) {
            Ok(v) => Ok(v),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(ExecutorError::Timeout),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(ExecutorError::Unavailable),
        }
    }
}

/// A program whose primitive choices come from an external party.
pub struct ExternalHandle {
    pub program: PlanProgram,
    endpoint: Box<dyn ExternalExecutor>,
    pub timeout: Duration,
}

pub fn attach_external_executor(
    program: PlanProgram,
    endpoint: Option<Box<dyn ExternalExecutor>>,
    timeout: Duration,
) -> Result<ExternalHandle, PlanError> {
    let endpoint = endpoint.ok_or(PlanError::EndpointUnavailable)?;
    Ok(ExternalHandle { program, endpoint, timeout })
}

impl ExternalHandle {
    /// Asks the endpoint for the next primitive. Silence past the timeout
    /// fails the program; illegal verbs still go to the world and come back
    /// as invalid feedback.
    pub fn tick(&mut self, world: &mut World) -> ExecStep {
        if self.program.is_finished() {
            return ExecStep::Idle;
        }
        let id = self.program.agent_id;
        let obs = match world.observe(id) {
            Ok(o) => o,
            Err(e) => {
                self.program.status = ProgramStatus::Failed(e.to_string());
                return ExecStep::Idle;
            }
        };
        match self.endpoint.choose(&obs, self.timeout) {
            Ok(Some(v)) => ExecStep::Primitive(ActionCommand::new(id, v)),
            Ok(None) => {
                self.program.status = ProgramStatus::Done;
                self.program.queue.clear();
                ExecStep::Idle
            }
            Err(ExecutorError::Timeout) => {
                self.program.status = ProgramStatus::Failed("executor_timeout".into());
                ExecStep::Idle
            }
            Err(ExecutorError::Unavailable) => {
                self.program.status = ProgramStatus::Failed("endpoint_unavailable".into());
                ExecStep::Idle
            }
        }
    }
}
