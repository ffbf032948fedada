//! Gym-like agent environment: embodied agents, primitive actions,
//! observations, synchronous and asynchronous stepping, and the event log.

use crate::geometry::{angle_diff, Aabb, Pose2D, Vec2};
use crate::procgen::CityMap;
use crate::traffic::{self, Obstacle, TrafficConfig, TrafficContext, TrafficState};
use crate::waypoints::{Mode, WaypointId, WaypointKind, Waypoints};
use crate::world_model::{Category, EntityId, SceneEntity, SceneGraph};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("unknown agent {0}")]
    UnknownAgent(u64),
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("agent {0} is busy")]
    Busy(u64),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActionError {
    #[error("verb {verb} not available to this body in its current state")]
    WrongEmbodiment { verb: String },
    #[error("target out of range")]
    OutOfRange,
    #[error("invalid target: {0}")]
    InvalidTarget(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embodiment {
    Humanoid,
    Robot,
    Vehicle,
}

impl Embodiment {
    pub fn category(self) -> Category {
        match self {
            Embodiment::Humanoid => Category::Humanoid,
            Embodiment::Robot => Category::Robot,
            Embodiment::Vehicle => Category::Vehicle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vitals {
    pub energy: f64,
    /// Integer cents.
    pub money: i64,
}

impl Default for Vitals {
    fn default() -> Self {
        Self { energy: 100.0, money: 2000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatusFlags {
    pub seated: bool,
    pub in_vehicle: bool,
    pub riding_scooter: bool,
    pub carrying: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Inventory {
    pub orders: Vec<u64>,
    pub scooter: bool,
    pub drinks: u32,
    /// Scene entities picked up or carried.
    pub items: Vec<SceneEntity>,
    /// Car entered with `enter_car`; removed from the scene while driven.
    pub car: Option<SceneEntity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub from: u64,
    pub tick: u64,
    pub text: String,
}

/// Persistent driving inputs for vehicle bodies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    pub throttle: f64,
    pub brake: f64,
    /// 0 = full left, 0.5 = straight, 1 = full right.
    pub steering: f64,
}

impl Default for Controls {
    fn default() -> Self {
        Self { throttle: 0.0, brake: 0.0, steering: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: u64,
    pub embodiment: Embodiment,
    pub pose: Pose2D,
    pub speed: f64,
    pub vitals: Vitals,
    pub inventory: Inventory,
    pub status_flags: StatusFlags,
    pub inbox: Vec<Message>,
    pub controls: Controls,
    /// Walking speed override in m/s; when set, a step covers `speed * dt`.
    pub cruise: Option<f64>,
    /// Multiplier on cruise while riding a scooter.
    pub scooter_multiplier: f64,
    pub pitch: f64,
    pub fov: f64,
    pub available_at: u64,
    /// Crosswalk areas the agent currently stands in.
    #[serde(default)]
    pub in_crosswalks: BTreeSet<usize>,
}

impl AgentState {
    /// Body used for kinematics: a humanoid in a car drives it.
    pub fn drives(&self) -> bool {
        self.embodiment == Embodiment::Vehicle || self.status_flags.in_vehicle
    }

    pub fn footprint(&self, cfg: &EnvConfig) -> Aabb {
        if self.drives() {
            return Aabb::oriented(&self.pose, cfg.vehicle_size.0, cfg.vehicle_size.1);
        }
        let h = match self.embodiment {
            Embodiment::Robot => cfg.robot_size / 2.0,
            _ => cfg.humanoid_size / 2.0,
        };
        Aabb::from_center(self.pose.position(), h, h)
    }

    pub fn category(&self) -> Category {
        if self.status_flags.in_vehicle {
            Category::Vehicle
        } else {
            self.embodiment.category()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "snake_case")]
pub enum Verb {
    StepForward,
    StepBackward,
    MoveLeft,
    MoveRight,
    Rotate { theta: f64 },
    Throttle { u: f64 },
    Brake { u: f64 },
    Steering { u: f64 },
    Stop,
    PickUp { target: u64 },
    Drop,
    Carry { target: u64 },
    PutDown,
    SitDown,
    StandUp,
    OpenDoor { target: u64 },
    EnterCar { target: u64 },
    ExitCar,
    RideScooter,
    LookUp,
    LookDown,
    Focus { fov: f64 },
    TakePhoto,
    Converse { text: String },
    PointDirection { theta: f64 },
    WaveHand,
    Argue,
    SendMessage { to: u64, text: String },
    DoNothing,
    Evaluate,
}

impl Verb {
    pub fn name(&self) -> &'static str {
        match self {
            Verb::StepForward => "step_forward",
            Verb::StepBackward => "step_backward",
            Verb::MoveLeft => "move_left",
            Verb::MoveRight => "move_right",
            Verb::Rotate { .. } => "rotate",
            Verb::Throttle { .. } => "throttle",
            Verb::Brake { .. } => "brake",
            Verb::Steering { .. } => "steering",
            Verb::Stop => "stop",
            Verb::PickUp { .. } => "pick_up",
            Verb::Drop => "drop",
            Verb::Carry { .. } => "carry",
            Verb::PutDown => "put_down",
            Verb::SitDown => "sit_down",
            Verb::StandUp => "stand_up",
            Verb::OpenDoor { .. } => "open_door",
            Verb::EnterCar { .. } => "enter_car",
            Verb::ExitCar => "exit_car",
            Verb::RideScooter => "ride_scooter",
            Verb::LookUp => "look_up",
            Verb::LookDown => "look_down",
            Verb::Focus { .. } => "focus",
            Verb::TakePhoto => "take_photo",
            Verb::Converse { .. } => "converse",
            Verb::PointDirection { .. } => "point_direction",
            Verb::WaveHand => "wave_hand",
            Verb::Argue => "argue",
            Verb::SendMessage { .. } => "send_message",
            Verb::DoNothing => "do_nothing",
            Verb::Evaluate => "evaluate",
        }
    }

    /// Range checks on continuous parameters.
    pub fn validate(&self) -> Result<(), EnvError> {
        let unit = |u: f64| (0.0..=1.0).contains(&u);
        let angle = |t: f64| (-std::f64::consts::PI..std::f64::consts::PI).contains(&t);
        let ok = match self {
            Verb::Throttle { u } | Verb::Brake { u } | Verb::Steering { u } => unit(*u),
            Verb::Rotate { theta } | Verb::PointDirection { theta } => angle(*theta),
            Verb::Focus { fov } => *fov > 0.0 && *fov < std::f64::consts::PI,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(EnvError::MalformedAction(format!("{} parameter out of range", self.name())))
        }
    }
}

const WALKING: &[&str] = &["step_forward", "step_backward", "move_left", "move_right"];
const DRIVING: &[&str] = &["throttle", "brake", "steering"];
const ALWAYS: &[&str] = &["do_nothing", "evaluate", "send_message", "take_photo", "look_up", "look_down", "focus", "stop"];

/// Verbs the agent may issue in its current body and state.
pub fn legal_verbs(embodiment: Embodiment, flags: &StatusFlags) -> BTreeSet<&'static str> {
    let mut v: BTreeSet<&'static str> = ALWAYS.iter().copied().collect();
    match embodiment {
        Embodiment::Vehicle => v.extend(DRIVING),
        Embodiment::Robot => {
            v.extend(WALKING);
            v.extend(["rotate", "pick_up", "drop"]);
        }
        Embodiment::Humanoid if flags.in_vehicle => {
            v.extend(DRIVING);
            v.insert("exit_car");
        }
        Embodiment::Humanoid if flags.seated => {
            v.extend(["stand_up", "rotate", "converse", "wave_hand", "argue", "point_direction"]);
        }
        Embodiment::Humanoid => {
            v.extend(WALKING);
            v.extend([
                "rotate",
                "pick_up",
                "drop",
                "carry",
                "put_down",
                "sit_down",
                "open_door",
                "enter_car",
                "ride_scooter",
                "converse",
                "point_direction",
                "wave_hand",
                "argue",
            ]);
            if flags.riding_scooter {
                v.remove("sit_down");
                v.remove("enter_car");
            }
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCommand {
    pub agent_id: u64,
    #[serde(flatten)]
    pub verb: Verb,
}

impl ActionCommand {
    pub fn new(agent_id: u64, verb: Verb) -> Self {
        Self { agent_id, verb }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Blocked,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub verb: String,
    pub outcome: Outcome,
    pub collision: Option<Category>,
    pub signal_violation: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl Feedback {
    fn ok(verb: &Verb) -> Self {
        Self { verb: verb.name().into(), outcome: Outcome::Ok, collision: None, signal_violation: false, error: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    CollisionStatic,
    CollisionDynamic,
    RedLightViolation,
    OrderEvent,
    Purchase,
    Message,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    pub agent_id: u64,
    pub kind: EventKind,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, e: Event) {
        debug_assert!(self.events.last().is_none_or(|l| l.tick <= e.tick));
        self.events.push(e);
    }

    pub fn since(&self, start: usize) -> &[Event] {
        &self.events[start.min(self.events.len())..]
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("event serializes"));
            s.push('\n');
        }
        s
    }

    pub fn count(&self, agent: u64, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.agent_id == agent && e.kind == kind).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    pub enabled: bool,
    pub size: usize,
    pub cell: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self { enabled: false, size: 64, cell: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub dt: f64,
    pub humanoid_step: f64,
    pub robot_step: f64,
    pub humanoid_size: f64,
    pub robot_size: f64,
    pub vehicle_size: (f64, f64),
    pub interaction_range: f64,
    pub view_radius: f64,
    pub raster: RasterConfig,
    pub wheelbase: f64,
    pub max_steer: f64,
    pub vehicle_v_max: f64,
    pub vehicle_a_max: f64,
    pub vehicle_brake: f64,
    /// Ticks an agent stays unavailable after an interaction verb.
    pub interaction_ticks: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            humanoid_step: 0.5,
            robot_step: 0.25,
            humanoid_size: 0.5,
            robot_size: 0.6,
            vehicle_size: (4.5, 1.8),
            interaction_range: 1.5,
            view_radius: 20.0,
            raster: RasterConfig::default(),
            wheelbase: 2.7,
            max_steer: 0.5,
            vehicle_v_max: 15.0,
            vehicle_a_max: 3.0,
            vehicle_brake: 4.0,
            interaction_ticks: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpawn {
    pub embodiment: Embodiment,
    pub spawn_waypoint: WaypointId,
    #[serde(default)]
    pub yaw: Option<f64>,
    #[serde(default)]
    pub vitals: Option<Vitals>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    #[default]
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrafficSpawn {
    #[serde(default)]
    pub n_vehicles: usize,
    #[serde(default)]
    pub n_pedestrians: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub map_ref: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub agents: Vec<AgentSpawn>,
    #[serde(default)]
    pub traffic: TrafficSpawn,
    #[serde(default)]
    pub mode: StepMode,
    #[serde(default = "default_interval")]
    pub interval: f64,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub traffic_config: Option<TrafficConfig>,
}

fn default_interval() -> f64 {
    0.1
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            map_ref: None,
            seed: 0,
            agents: Vec::new(),
            traffic: TrafficSpawn::default(),
            mode: StepMode::Sync,
            interval: default_interval(),
            env: EnvConfig::default(),
            traffic_config: None,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(s: &str) -> Result<Self, EnvError> {
        serde_json::from_str(s).map_err(|e| EnvError::ScenarioInvalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityView {
    pub id: u64,
    pub category: Category,
    pub pose: Pose2D,
    #[serde(skip_serializing_if = "BTreeSet::is_empty", default)]
    pub tags: BTreeSet<String>,
}

/// Egocentric category grid: row 0 is farthest ahead, column 0 is leftmost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub cell: f64,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent_id: u64,
    pub tick: u64,
    pub agent_pose: Pose2D,
    pub compass: f64,
    pub speed: f64,
    pub vitals: Vitals,
    pub status_flags: StatusFlags,
    pub local_raster: Option<Raster>,
    pub scene_graph_view: Vec<EntityView>,
    pub messages: Vec<Message>,
    pub last_action_feedback: Option<Feedback>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub tick: u64,
    pub agent_id: u64,
}

/// Agents are numbered from here, well above static scene ids.
pub const AGENT_ID_BASE: u64 = 1_000_000;
/// Background traffic ids start here.
pub const TRAFFIC_ID_BASE: u64 = 2_000_000;

/// Simulation state owned by the single executor.
#[derive(Debug, Clone)]
pub struct World {
    pub map: CityMap,
    /// Current scene; starts as the map's scene, changed by pick-ups and edits.
    pub scene: SceneGraph,
    pub waypoints: Waypoints,
    pub static_blocked: BTreeSet<WaypointId>,
    pub traffic: TrafficState,
    pub agents: BTreeMap<u64, AgentState>,
    pub config: EnvConfig,
    pub tick: u64,
    pub log: EventLog,
    pub evaluations: Vec<EvaluateRequest>,
    pub feedback: BTreeMap<u64, Feedback>,
    photo_requests: BTreeSet<u64>,
    next_agent_id: u64,
    scene_dirty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: BTreeMap<u64, Observation>,
    pub events: Vec<Event>,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    tick: u64,
    agents: &'a BTreeMap<u64, AgentState>,
    traffic: &'a TrafficState,
    events: usize,
}

impl World {
    /// Builds the initial world from a map and scenario: agents first, then
    /// traffic around them.
    pub fn reset(map: &CityMap, scenario: &ScenarioConfig) -> Result<(World, BTreeMap<u64, Observation>), EnvError> {
        if !(scenario.interval > 0.0) || !(scenario.env.dt > 0.0) {
            return Err(EnvError::ScenarioInvalid("interval and dt must be positive".into()));
        }
        let waypoints = Waypoints::build(&map.roads, &map.config.layout).map_err(|e| EnvError::ScenarioInvalid(e.to_string()))?;
        Self::from_parts(map, waypoints, scenario)
    }

    /// Like `reset` but on caller-supplied waypoint graphs.
    pub fn from_parts(map: &CityMap, waypoints: Waypoints, scenario: &ScenarioConfig) -> Result<(World, BTreeMap<u64, Observation>), EnvError> {
        if !(scenario.interval > 0.0) || !(scenario.env.dt > 0.0) {
            return Err(EnvError::ScenarioInvalid("interval and dt must be positive".into()));
        }
        if map.scene.next_id().0 >= AGENT_ID_BASE {
            return Err(EnvError::ScenarioInvalid("scene ids overlap the agent id range".into()));
        }
        let static_blocked = traffic::blocked_waypoints(&map.scene, &waypoints.fine, scenario.env.humanoid_size / 2.0);
        let mut tcfg = scenario.traffic_config.clone().unwrap_or_default();
        tcfg.n_vehicles = scenario.traffic.n_vehicles;
        tcfg.n_pedestrians = scenario.traffic.n_pedestrians;
        let mut world = World {
            map: map.clone(),
            scene: map.scene.clone(),
            waypoints,
            static_blocked,
            traffic: TrafficState::new(scenario.seed, tcfg),
            agents: BTreeMap::new(),
            config: scenario.env.clone(),
            tick: 0,
            log: EventLog::default(),
            evaluations: Vec::new(),
            feedback: BTreeMap::new(),
            photo_requests: BTreeSet::new(),
            next_agent_id: AGENT_ID_BASE,
            scene_dirty: false,
        };
        // Agent ids come first so they do not depend on traffic size.
        for spawn in &scenario.agents {
            world.register_agent(spawn)?;
        }
        let reserved: Vec<Aabb> = world.agents.values().map(|a| a.footprint(&world.config)).collect();
        let first = TRAFFIC_ID_BASE;
        let ctx = TrafficContext { net: &world.map.roads, scene: &world.scene, graph: &world.waypoints.fine, static_blocked: &world.static_blocked };
        traffic::spawn_population(&mut world.traffic, &ctx, first, &reserved).map_err(|e| EnvError::ScenarioInvalid(e.to_string()))?;
        let obs = world.observe_all();
        Ok((world, obs))
    }

    /// Adds an agent at a spawn waypoint and returns its id.
    pub fn register_agent(&mut self, spawn: &AgentSpawn) -> Result<u64, EnvError> {
        let g = &self.waypoints.fine;
        let w = g.get(spawn.spawn_waypoint).ok_or_else(|| EnvError::ScenarioInvalid(format!("unknown spawn waypoint {}", spawn.spawn_waypoint)))?;
        let want = if spawn.embodiment == Embodiment::Vehicle { Mode::Vehicle } else { Mode::Pedestrian };
        if w.kind.mode() != want {
            return Err(EnvError::ScenarioInvalid(format!("waypoint {} is not a {:?} waypoint", w.id, want)));
        }
        let yaw = spawn.yaw.unwrap_or_else(|| {
            if want == Mode::Vehicle {
                g.neighbors(w.id).first().map_or(0.0, |e| g.position(e.to).sub(w.position).angle())
            } else {
                0.0
            }
        });
        let vitals = spawn.vitals.unwrap_or_default();
        if vitals.energy < 0.0 || vitals.money < 0 {
            return Err(EnvError::ScenarioInvalid("vitals must be non-negative".into()));
        }
        let id = self.next_agent_id;
        let agent = AgentState {
            id,
            embodiment: spawn.embodiment,
            pose: Pose2D::at(w.position, yaw),
            speed: 0.0,
            vitals,
            inventory: Inventory::default(),
            status_flags: StatusFlags::default(),
            inbox: Vec::new(),
            controls: Controls::default(),
            cruise: None,
            scooter_multiplier: 1.0,
            pitch: 0.0,
            fov: std::f64::consts::FRAC_PI_2,
            available_at: self.tick,
            in_crosswalks: BTreeSet::new(),
        };
        let fp = agent.footprint(&self.config);
        if self.scene.collides(&fp, &BTreeSet::new()) || self.dynamic_collider(&fp, id).is_some() {
            return Err(EnvError::ScenarioInvalid(format!("spawn waypoint {} is occupied", w.id)));
        }
        self.next_agent_id += 1;
        self.agents.insert(id, agent);
        Ok(id)
    }

    pub fn agent(&self, id: u64) -> Result<&AgentState, EnvError> {
        self.agents.get(&id).ok_or(EnvError::UnknownAgent(id))
    }

    pub fn agent_mut(&mut self, id: u64) -> Result<&mut AgentState, EnvError> {
        self.agents.get_mut(&id).ok_or(EnvError::UnknownAgent(id))
    }

    pub fn is_available(&self, id: u64) -> bool {
        self.agents.get(&id).is_some_and(|a| a.available_at <= self.tick)
    }

    /// Canonical serialized state used for replay and equivalence checks.
    pub fn state_json(&self) -> String {
        let mut s = serde_json::to_string(&Snapshot { tick: self.tick, agents: &self.agents, traffic: &self.traffic, events: self.log.events.len() })
            .expect("state serializes");
        if self.scene_dirty {
            s.push_str(&self.scene.to_json());
        }
        s
    }

    pub fn log_event(&mut self, agent_id: u64, kind: EventKind, payload: serde_json::Value) {
        self.log.push(Event { tick: self.tick, agent_id, kind, payload });
    }

    /// First dynamic entity (traffic or other agent) overlapping `fp`, by id.
    fn dynamic_collider(&self, fp: &Aabb, own: u64) -> Option<(u64, Category)> {
        let mut best: Option<(u64, Category)> = None;
        let mut consider = |id: u64, cat: Category, other: &Aabb| {
            if id != own && other.overlaps(fp) && best.is_none_or(|(b, _)| id < b) {
                best = Some((id, cat));
            }
        };
        for v in &self.traffic.vehicles {
            consider(v.id, Category::Vehicle, &self.traffic.vehicle_footprint(v));
        }
        for p in &self.traffic.pedestrians {
            consider(p.id, Category::Pedestrian, &self.traffic.pedestrian_footprint(p));
        }
        for a in self.agents.values() {
            consider(a.id, a.category(), &a.footprint(&self.config));
        }
        best
    }

    fn static_collider(&self, fp: &Aabb) -> Option<&SceneEntity> {
        self.scene.colliders(fp, &BTreeSet::new()).into_iter().next()
    }

    /// Moves an agent to `pose` unless it would overlap something. Logs the
    /// collision or red-light entry and returns the feedback.
    fn try_move(&mut self, id: u64, pose: Pose2D, verb: &Verb) -> Feedback {
        let mut fb = Feedback::ok(verb);
        let agent = self.agents[&id].clone();
        let mut moved = agent.clone();
        moved.pose = pose;
        let fp = moved.footprint(&self.config);
        if !self.scene.extent().contains(&fp) {
            fb.outcome = Outcome::Blocked;
            fb.collision = Some(Category::RoadSegment);
            self.log_event(id, EventKind::CollisionStatic, serde_json::json!({"reason": "extent"}));
            return fb;
        }
        if let Some(e) = self.static_collider(&fp) {
            let (eid, cat) = (e.id, e.category);
            fb.outcome = Outcome::Blocked;
            fb.collision = Some(cat);
            self.log_event(id, EventKind::CollisionStatic, serde_json::json!({"with": eid, "category": cat}));
            return fb;
        }
        if let Some((oid, cat)) = self.dynamic_collider(&fp, id) {
            fb.outcome = Outcome::Blocked;
            fb.collision = Some(cat);
            self.log_event(id, EventKind::CollisionDynamic, serde_json::json!({"with": oid, "category": cat}));
            return fb;
        }
        let inside: BTreeSet<usize> =
            self.waypoints.fine.crosswalks.iter().enumerate().filter(|(_, c)| c.area.contains_point(pose.position())).map(|(i, _)| i).collect();
        let drives = moved.drives();
        for &i in inside.difference(&agent.in_crosswalks) {
            let cw = &self.waypoints.fine.crosswalks[i];
            let Some(sig) = cw.signal.and_then(|s| self.traffic.signal(s)) else {
                continue;
            };
            let red = if drives { sig.phase_for(cw.road_axis) == crate::traffic::Phase::Red } else { !sig.walk_allowed(cw.road_axis) };
            if red {
                fb.signal_violation = true;
                let payload = serde_json::json!({"intersection": cw.intersection.0, "segment": cw.segment.0});
                self.log_event(id, EventKind::RedLightViolation, payload);
            }
        }
        let a = self.agents.get_mut(&id).unwrap();
        a.pose = pose;
        a.in_crosswalks = inside;
        fb
    }

    /// Distance one walking step covers for this agent.
    pub fn step_length(&self, a: &AgentState) -> f64 {
        if let Some(v) = a.cruise {
            let mult = if a.status_flags.riding_scooter { a.scooter_multiplier } else { 1.0 };
            return v * mult * self.config.dt;
        }
        match a.embodiment {
            Embodiment::Robot => self.config.robot_step,
            _ => self.config.humanoid_step,
        }
    }

    fn entity_in_range(&self, a: &AgentState, target: u64) -> Result<SceneEntity, ActionError> {
        let e = self.scene.get(EntityId(target)).ok_or_else(|| ActionError::InvalidTarget(format!("no entity {target}")))?;
        if e.footprint.distance_to_point(a.pose.position()) > self.config.interaction_range {
            return Err(ActionError::OutOfRange);
        }
        Ok(e.clone())
    }

    fn take_item(&mut self, id: u64, target: u64, carry: bool) -> Result<(), ActionError> {
        let a = &self.agents[&id];
        let e = self.entity_in_range(a, target)?;
        if !matches!(e.category, Category::UrbanProp | Category::GeneratedAsset) {
            return Err(ActionError::InvalidTarget(format!("entity {target} cannot be picked up")));
        }
        self.scene.remove(e.id).map_err(|err| ActionError::InvalidTarget(err.to_string()))?;
        self.scene_dirty = true;
        self.refresh_blocked();
        let a = self.agents.get_mut(&id).unwrap();
        a.inventory.items.push(e);
        if carry {
            a.status_flags.carrying = true;
        }
        Ok(())
    }

    fn place_item(&mut self, id: u64) -> Result<(), ActionError> {
        let a = &self.agents[&id];
        let Some(mut e) = a.inventory.items.last().cloned() else {
            return Err(ActionError::InvalidTarget("nothing held".into()));
        };
        let at = a.pose.translated_local(0.8, 0.0).position();
        let (w, h) = (e.footprint.width() / 2.0, e.footprint.height() / 2.0);
        e.footprint = Aabb::from_center(at, w, h);
        e.pose = Pose2D::at(at, e.pose.yaw);
        if !self.scene.extent().contains(&e.footprint)
            || self.scene.collides(&e.footprint, &BTreeSet::new())
            || self.dynamic_collider(&e.footprint, id).is_some()
        {
            return Err(ActionError::InvalidTarget("no room to put the item down".into()));
        }
        self.scene.insert(e).map_err(|err| ActionError::InvalidTarget(err.to_string()))?;
        self.scene_dirty = true;
        self.refresh_blocked();
        let a = self.agents.get_mut(&id).unwrap();
        a.inventory.items.pop();
        a.status_flags.carrying = false;
        Ok(())
    }

    /// Recomputes waypoints covered by static obstacles after scene edits.
    pub fn refresh_blocked(&mut self) {
        self.static_blocked = traffic::blocked_waypoints(&self.scene, &self.waypoints.fine, self.config.humanoid_size / 2.0);
    }

    /// Applies a scene edit to the live scene and refreshes blocked waypoints.
    pub fn edit_scene(&mut self, cmd: &crate::world_model::SceneEditCommand) -> Result<crate::world_model::EntityId, crate::world_model::SceneError> {
        let id = self.scene.edit_scene(cmd)?;
        self.scene_dirty = true;
        self.refresh_blocked();
        Ok(id)
    }

    /// Executes one primitive for its agent. Movement that would overlap
    /// something comes back as a blocked feedback rather than an error.
    pub fn execute_primitive(&mut self, cmd: &ActionCommand) -> Result<Feedback, ActionError> {
        let id = cmd.agent_id;
        let a = self.agents.get(&id).ok_or_else(|| ActionError::InvalidTarget(format!("unknown agent {id}")))?;
        let verb = &cmd.verb;
        if !legal_verbs(a.embodiment, &a.status_flags).contains(verb.name()) {
            return Err(ActionError::WrongEmbodiment { verb: verb.name().into() });
        }
        let step = self.step_length(a);
        let pose = a.pose;
        let mut fb = Feedback::ok(verb);
        match verb {
            Verb::StepForward | Verb::StepBackward | Verb::MoveLeft | Verb::MoveRight => {
                let (f, l) = match verb {
                    Verb::StepForward => (step, 0.0),
                    Verb::StepBackward => (-step, 0.0),
                    Verb::MoveLeft => (0.0, step),
                    _ => (0.0, -step),
                };
                fb = self.try_move(id, pose.translated_local(f, l), verb);
                let moved = fb.outcome == Outcome::Ok;
                let a = self.agents.get_mut(&id).unwrap();
                a.speed = if moved { step / self.config.dt } else { 0.0 };
            }
            Verb::Rotate { theta } => {
                let a = self.agents.get_mut(&id).unwrap();
                a.pose = pose.rotated(*theta);
            }
            Verb::Throttle { u } => {
                let a = self.agents.get_mut(&id).unwrap();
                a.controls.throttle = *u;
                a.controls.brake = 0.0;
            }
            Verb::Brake { u } => {
                let a = self.agents.get_mut(&id).unwrap();
                a.controls.brake = *u;
                a.controls.throttle = 0.0;
            }
            Verb::Steering { u } => {
                self.agents.get_mut(&id).unwrap().controls.steering = *u;
            }
            Verb::Stop => {
                let a = self.agents.get_mut(&id).unwrap();
                if a.drives() {
                    a.controls.throttle = 0.0;
                    a.controls.brake = 1.0;
                } else {
                    a.speed = 0.0;
                }
            }
            Verb::PickUp { target } => self.take_item(id, *target, false)?,
            Verb::Carry { target } => self.take_item(id, *target, true)?,
            Verb::Drop | Verb::PutDown => self.place_item(id)?,
            Verb::SitDown => {
                let a = self.agents.get_mut(&id).unwrap();
                a.status_flags.seated = true;
                a.speed = 0.0;
            }
            Verb::StandUp => self.agents.get_mut(&id).unwrap().status_flags.seated = false,
            Verb::OpenDoor { target } => {
                let e = self.entity_in_range(&self.agents[&id], *target)?;
                if e.category != Category::Building {
                    return Err(ActionError::InvalidTarget(format!("entity {target} has no door")));
                }
            }
            Verb::EnterCar { target } => {
                let e = self.entity_in_range(&self.agents[&id], *target)?;
                if e.category != Category::Vehicle {
                    return Err(ActionError::InvalidTarget(format!("entity {target} is not a car")));
                }
                self.scene.remove(e.id).map_err(|err| ActionError::InvalidTarget(err.to_string()))?;
                self.scene_dirty = true;
                let a = self.agents.get_mut(&id).unwrap();
                a.pose = e.pose;
                a.status_flags.in_vehicle = true;
                a.status_flags.riding_scooter = false;
                a.controls = Controls::default();
                a.speed = 0.0;
                a.inventory.car = Some(e);
            }
            Verb::ExitCar => {
                let a = &self.agents[&id];
                let mut car = a.inventory.car.clone().ok_or_else(|| ActionError::InvalidTarget("not in a car".into()))?;
                if a.speed > 0.1 {
                    return Err(ActionError::InvalidTarget("car still moving".into()));
                }
                car.pose = a.pose;
                car.footprint = Aabb::oriented(&a.pose, self.config.vehicle_size.0, self.config.vehicle_size.1);
                let out = a.pose.translated_local(0.0, 0.5 * self.config.vehicle_size.1 + 0.6);
                let h = self.config.humanoid_size / 2.0;
                let body = Aabb::from_center(out.position(), h, h);
                if self.scene.collides(&body, &BTreeSet::new()) || self.scene.collides(&car.footprint, &BTreeSet::new()) {
                    return Err(ActionError::InvalidTarget("no room to get out".into()));
                }
                self.scene.insert(car).map_err(|err| ActionError::InvalidTarget(err.to_string()))?;
                let a = self.agents.get_mut(&id).unwrap();
                a.inventory.car = None;
                a.status_flags.in_vehicle = false;
                a.pose = out;
                a.speed = 0.0;
            }
            Verb::RideScooter => {
                let a = self.agents.get_mut(&id).unwrap();
                if !a.inventory.scooter {
                    return Err(ActionError::InvalidTarget("no scooter owned".into()));
                }
                a.status_flags.riding_scooter = !a.status_flags.riding_scooter;
            }
            Verb::LookUp => {
                let a = self.agents.get_mut(&id).unwrap();
                a.pitch = (a.pitch + 0.2).min(std::f64::consts::FRAC_PI_2);
            }
            Verb::LookDown => {
                let a = self.agents.get_mut(&id).unwrap();
                a.pitch = (a.pitch - 0.2).max(-std::f64::consts::FRAC_PI_2);
            }
            Verb::Focus { fov } => self.agents.get_mut(&id).unwrap().fov = *fov,
            Verb::TakePhoto => {
                self.photo_requests.insert(id);
            }
            Verb::Converse { text } => {
                self.log_event(id, EventKind::Message, serde_json::json!({"converse": text}));
            }
            Verb::SendMessage { to, text } => {
                let tick = self.tick;
                let r = self.agents.get_mut(to).ok_or_else(|| ActionError::InvalidTarget(format!("unknown recipient {to}")))?;
                r.inbox.push(Message { from: id, tick, text: text.clone() });
                self.log_event(id, EventKind::Message, serde_json::json!({"to": to, "text": text}));
            }
            Verb::Evaluate => self.evaluations.push(EvaluateRequest { tick: self.tick, agent_id: id }),
            Verb::PointDirection { .. } | Verb::WaveHand | Verb::Argue | Verb::DoNothing => {}
        }
        Ok(fb)
    }

    /// Runs one action and records its feedback; errors become invalid feedback.
    fn apply(&mut self, cmd: &ActionCommand) {
        if !matches!(cmd.verb, Verb::StepForward | Verb::StepBackward | Verb::MoveLeft | Verb::MoveRight) {
            if let Some(a) = self.agents.get_mut(&cmd.agent_id) {
                if !a.drives() {
                    a.speed = 0.0;
                }
            }
        }
        let fb = match self.execute_primitive(cmd) {
            Ok(fb) => fb,
            Err(e) => Feedback {
                verb: cmd.verb.name().into(),
                outcome: Outcome::Invalid,
                collision: None,
                signal_violation: false,
                error: Some(e.to_string()),
            },
        };
        let busy = match cmd.verb {
            Verb::SitDown | Verb::StandUp | Verb::EnterCar { .. } | Verb::ExitCar | Verb::PickUp { .. } | Verb::Carry { .. } => {
                self.config.interaction_ticks
            }
            _ => 1,
        };
        if let Some(a) = self.agents.get_mut(&cmd.agent_id) {
            a.available_at = self.tick + busy.max(1);
        }
        self.feedback.insert(cmd.agent_id, fb);
    }

    /// Kinematic bicycle update for every driving agent.
    fn integrate_vehicles(&mut self) {
        let ids: Vec<u64> = self.agents.values().filter(|a| a.drives()).map(|a| a.id).collect();
        let cfg = self.config.clone();
        for id in ids {
            let a = &self.agents[&id];
            let acc = a.controls.throttle * cfg.vehicle_a_max - a.controls.brake * cfg.vehicle_brake;
            let v = (a.speed + acc * cfg.dt).clamp(0.0, cfg.vehicle_v_max);
            let delta = (a.controls.steering - 0.5) * 2.0 * cfg.max_steer;
            // Steering toward 0 turns left, so the yaw rate sign is flipped.
            let yaw = a.pose.yaw - v / cfg.wheelbase * delta.tan() * cfg.dt;
            let h = Vec2::from_angle(yaw);
            let p = a.pose.position().add(h.scale(v * cfg.dt));
            if v == 0.0 {
                self.agents.get_mut(&id).unwrap().speed = 0.0;
                continue;
            }
            let verb = Verb::Throttle { u: a.controls.throttle };
            let fb = self.try_move(id, Pose2D::at(p, yaw), &verb);
            let a = self.agents.get_mut(&id).unwrap();
            if fb.outcome == Outcome::Blocked {
                a.speed = 0.0;
                if let Some(prev) = self.feedback.get_mut(&id) {
                    prev.outcome = Outcome::Blocked;
                    prev.collision = fb.collision;
                }
            } else {
                a.speed = v;
                if fb.signal_violation {
                    if let Some(prev) = self.feedback.get_mut(&id) {
                        prev.signal_violation = true;
                    }
                }
            }
        }
    }

    fn traffic_tick(&mut self) {
        let agents: Vec<Obstacle> = self.agents.values().map(|a| Obstacle { id: a.id, footprint: a.footprint(&self.config) }).collect();
        let ctx = TrafficContext { net: &self.map.roads, scene: &self.scene, graph: &self.waypoints.fine, static_blocked: &self.static_blocked };
        traffic::step_traffic(&mut self.traffic, &ctx, &agents, self.config.dt);
    }

    /// One lockstep tick: every agent's action in ascending id, vehicle
    /// kinematics, then traffic.
    pub fn step_sync(&mut self, actions: &[ActionCommand]) -> Result<StepResult, EnvError> {
        let mut by_agent: BTreeMap<u64, &ActionCommand> = BTreeMap::new();
        for a in actions {
            if !self.agents.contains_key(&a.agent_id) {
                return Err(EnvError::UnknownAgent(a.agent_id));
            }
            a.verb.validate()?;
            if by_agent.insert(a.agent_id, a).is_some() {
                return Err(EnvError::MalformedAction(format!("two actions for agent {}", a.agent_id)));
            }
        }
        if let Some(missing) = self.agents.keys().find(|id| !by_agent.contains_key(id)) {
            return Err(EnvError::MalformedAction(format!("no action for agent {missing}")));
        }
        let start = self.log.events.len();
        for cmd in by_agent.values() {
            self.apply(cmd);
        }
        self.finish_tick();
        Ok(StepResult { observations: self.observe_all(), events: self.log.since(start).to_vec() })
    }

    fn finish_tick(&mut self) {
        self.integrate_vehicles();
        self.traffic_tick();
        self.tick += 1;
    }

    /// Fills `do_nothing` for agents without an action.
    pub fn fill_idle(&self, actions: &[ActionCommand]) -> Vec<ActionCommand> {
        let have: BTreeSet<u64> = actions.iter().map(|a| a.agent_id).collect();
        let mut out = actions.to_vec();
        out.extend(self.agents.keys().filter(|id| !have.contains(id)).map(|id| ActionCommand::new(*id, Verb::DoNothing)));
        out
    }

    pub fn observe_all(&mut self) -> BTreeMap<u64, Observation> {
        let ids: Vec<u64> = self.agents.keys().copied().collect();
        ids.into_iter().map(|id| (id, self.observe(id).expect("agent exists"))).collect()
    }

    /// Observation for one agent; drains its inbox.
    pub fn observe(&mut self, id: u64) -> Result<Observation, EnvError> {
        let photo = self.photo_requests.remove(&id);
        let a = self.agent(id)?.clone();
        let raster = (self.config.raster.enabled || photo).then(|| self.raster(&a));
        let view = self.view(&a);
        let messages = std::mem::take(&mut self.agents.get_mut(&id).unwrap().inbox);
        Ok(Observation {
            agent_id: id,
            tick: self.tick,
            agent_pose: a.pose,
            compass: a.pose.yaw,
            speed: a.speed,
            vitals: a.vitals,
            status_flags: a.status_flags.clone(),
            local_raster: raster,
            scene_graph_view: view,
            messages,
            last_action_feedback: self.feedback.get(&id).cloned(),
        })
    }

    /// Every dynamic entity as (id, category, pose, footprint).
    pub fn dynamic_entities(&self) -> Vec<(u64, Category, Pose2D, Aabb)> {
        let mut out: Vec<_> = self
            .traffic
            .vehicles
            .iter()
            .map(|v| (v.id, Category::Vehicle, v.pose, self.traffic.vehicle_footprint(v)))
            .chain(self.traffic.pedestrians.iter().map(|p| (p.id, Category::Pedestrian, p.pose, self.traffic.pedestrian_footprint(p))))
            .chain(self.agents.values().map(|a| (a.id, a.category(), a.pose, a.footprint(&self.config))))
            .collect();
        out.sort_by_key(|e| e.0);
        out
    }

    fn view(&self, a: &AgentState) -> Vec<EntityView> {
        let r = self.config.view_radius;
        let c = a.pose.position();
        let region = Aabb::from_center(c, r, r);
        let mut out: Vec<EntityView> = self
            .scene
            .query_region(&region)
            .into_iter()
            .filter(|e| e.category != Category::RoadSegment && e.footprint.distance_to_point(c) <= r)
            .map(|e| EntityView { id: e.id.0, category: e.category, pose: e.pose, tags: e.tags.clone() })
            .collect();
        for (id, cat, pose, fp) in self.dynamic_entities() {
            if id != a.id && fp.distance_to_point(c) <= r {
                out.push(EntityView { id, category: cat, pose, tags: BTreeSet::new() });
            }
        }
        out.sort_by_key(|e| e.id);
        out
    }

    /// Egocentric semantic grid; dynamic entities draw over static ones and
    /// roads sit underneath everything else.
    pub fn raster(&self, a: &AgentState) -> Raster {
        let rc = &self.config.raster;
        let n = rc.size;
        let dynamic = self.dynamic_entities();
        let mut data = vec![0u8; n * n];
        let half = n as f64 / 2.0;
        for row in 0..n {
            for col in 0..n {
                let fwd = (half - row as f64 - 0.5) * rc.cell;
                let left = (half - col as f64 - 0.5) * rc.cell;
                let p = a.pose.translated_local(fwd, left).position();
                let dyn_hit = dynamic.iter().find(|(id, _, _, fp)| *id != a.id && fp.contains_point(p));
                let cat = if let Some(d) = dyn_hit {
                    Some(d.1)
                } else {
                    let hits = self.scene.query_point(p);
                    hits.iter().find(|e| e.category != Category::RoadSegment).or_else(|| hits.first()).map(|e| e.category)
                };
                data[row * n + col] = cat.map_or(0, Category::raster_id);
            }
        }
        Raster { width: n, height: n, cell: rc.cell, data }
    }

    /// True when `other` shows up in `viewer`'s raster footprint within `range`.
    pub fn sees(&self, viewer: u64, other: u64, range: f64) -> bool {
        let (Some(a), Some(b)) = (self.agents.get(&viewer), self.agents.get(&other)) else {
            return false;
        };
        let rel = b.pose.position().sub(a.pose.position());
        if rel.length() > range {
            return false;
        }
        let h = a.pose.heading();
        let fwd = rel.dot(h);
        let left = rel.dot(h.perp());
        let extent = self.config.raster.size as f64 * self.config.raster.cell / 2.0;
        fwd.abs() <= extent && left.abs() <= extent
    }

    /// Nearest pedestrian waypoint to an agent's position.
    pub fn nearest_waypoint(&self, id: u64) -> Option<WaypointId> {
        let a = self.agents.get(&id)?;
        let mode = if a.drives() { Mode::Vehicle } else { Mode::Pedestrian };
        self.waypoints.fine.nearest(a.pose.position(), mode)
    }

    /// Heading error to face `target` from an agent.
    pub fn bearing_error(&self, id: u64, target: Vec2) -> Option<f64> {
        let a = self.agents.get(&id)?;
        Some(angle_diff(target.sub(a.pose.position()).angle(), a.pose.yaw))
    }

    pub fn is_sidewalk(&self, w: WaypointId) -> bool {
        self.waypoints.fine.get(w).is_some_and(|n| n.kind == WaypointKind::FineSidewalk)
    }
}

/// Thread-safe pending-action buffer for asynchronous mode.
#[derive(Debug, Default)]
pub struct ActionBuffer {
    inner: Mutex<BufferState>,
}

#[derive(Debug, Default)]
struct BufferState {
    pending: BTreeMap<u64, ActionCommand>,
    busy: BTreeSet<u64>,
    known: BTreeSet<u64>,
}

impl ActionBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accepts at most one pending action per available agent.
    pub fn submit(&self, cmd: ActionCommand) -> Result<(), EnvError> {
        cmd.verb.validate()?;
        let mut s = self.inner.lock().expect("buffer lock");
        if !s.known.contains(&cmd.agent_id) {
            return Err(EnvError::UnknownAgent(cmd.agent_id));
        }
        if s.busy.contains(&cmd.agent_id) || s.pending.contains_key(&cmd.agent_id) {
            return Err(EnvError::Busy(cmd.agent_id));
        }
        s.pending.insert(cmd.agent_id, cmd);
        Ok(())
    }

    fn drain(&self) -> Vec<ActionCommand> {
        let mut s = self.inner.lock().expect("buffer lock");
        std::mem::take(&mut s.pending).into_values().collect()
    }

    /// Publishes agent availability after a tick.
    pub fn sync_availability(&self, world: &World) {
        let mut s = self.inner.lock().expect("buffer lock");
        s.known = world.agents.keys().copied().collect();
        s.busy = world.agents.values().filter(|a| a.available_at > world.tick).map(|a| a.id).collect();
    }

    pub fn is_available(&self, id: u64) -> bool {
        let s = self.inner.lock().expect("buffer lock");
        s.known.contains(&id) && !s.busy.contains(&id) && !s.pending.contains_key(&id)
    }
}

/// Producer of actions for asynchronous runs. Called once per interval with
/// fresh observations; submits into the buffer.
pub trait ActionSource {
    fn poll(&mut self, tick: u64, observations: &BTreeMap<u64, Observation>, buffer: &ActionBuffer);
}

impl<F> ActionSource for F
where
    F: FnMut(u64, &BTreeMap<u64, Observation>, &ActionBuffer),
{
    fn poll(&mut self, tick: u64, observations: &BTreeMap<u64, Observation>, buffer: &ActionBuffer) {
        self(tick, observations, buffer)
    }
}

impl World {
    /// Processes buffered actions once: unavailable agents idle, others act.
    pub fn async_tick(&mut self, buffer: &ActionBuffer) -> BTreeMap<u64, Observation> {
        let drained = buffer.drain();
        for cmd in &drained {
            if self.is_available(cmd.agent_id) {
                self.apply(cmd);
            }
        }
        self.finish_tick();
        buffer.sync_availability(self);
        self.observe_all()
    }

    /// Simulated-clock asynchronous run. Each interval the source submits,
    /// then the buffer drains and the world ticks `interval / dt` times.
    pub fn run_async(&mut self, source: &mut dyn ActionSource, buffer: &ActionBuffer, interval: f64, duration: f64) -> Result<(), EnvError> {
        if !(interval > 0.0) {
            return Err(EnvError::ScenarioInvalid("interval must be positive".into()));
        }
        let ticks_per = ((interval / self.config.dt).round() as u64).max(1);
        let intervals = (duration / interval).round() as u64;
        buffer.sync_availability(self);
        let mut obs = self.observe_all();
        for _ in 0..intervals {
            source.poll(self.tick, &obs, buffer);
            obs = self.async_tick(buffer);
            for _ in 1..ticks_per {
                obs = self.async_tick(buffer);
            }
        }
        Ok(())
    }
}
