//! Newline-delimited JSON command protocol over TCP.
//!
//! Requests are `{"id": n, "cmd": "...", "args": {...}}`, one per line.
//! Every request gets exactly one response `{"id": n, "status": "ok", "data": ...}`
//! or `{"id": n, "status": "error", "error": {"code", "message"}}`. Lines that
//! are not a JSON object with an integer id are answered with id 0.
//!
//! A [`Session`] owns the world and is the single consumer of every
//! mutation; [`serve`] feeds it from any number of connections.

use crate::delivery::{DeliveryAction, Economy, EconomyConfig, GreedyFleet};
use crate::env::{ActionBuffer, ActionCommand, AgentSpawn, Embodiment, ScenarioConfig, StepMode, Verb, Vitals, World};
use crate::geometry::{Aabb, Vec2};
use crate::planner::{self, ExecStep, HighLevelPlan, PlanError, PlanProgram, Vocabulary};
use crate::procgen::{self, CityMap, GenConfig};
use crate::tasks::{self, EpisodeMonitor, EpisodeRecord, Judge, MetricFamily, NavTask, TaskConfig};
use crate::waypoints::{Mode, WaypointId};
use crate::world_model::{Category, EntityId, SceneEditCommand};
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::Duration;

pub const DEFAULT_PORT: u16 = 9000;
/// Requests a connection may have queued before new ones are refused.
pub const MAX_PENDING: usize = 64;
/// Upper bound on ticks per `sim.step`.
pub const MAX_STEP: u64 = 1_000_000;

/// Every command the session understands.
pub const COMMANDS: &[&str] = &[
    "world.load",
    "world.reset",
    "world.info",
    "scene.query",
    "scene.edit",
    "agent.register",
    "agent.observe",
    "agent.act",
    "agent.plan",
    "task.start",
    "task.status",
    "metrics.export",
    "sim.step",
    "sim.run",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub cmd: String,
    #[serde(default)]
    pub args: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl Response {
    pub fn ok(id: u64, data: Value) -> Self {
        Self { id, status: "ok".into(), data: Some(data), error: None }
    }

    pub fn err(id: u64, e: ErrorBody) -> Self {
        Self { id, status: "error".into(), data: None, error: Some(e) }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }
}

type CmdResult = Result<Value, ErrorBody>;

/// Splits a raw line into a request, or an error response carrying the best id available.
pub fn parse_request(line: &str) -> Result<Request, Response> {
    let malformed = |id, m: String| Response::err(id, ErrorBody::new("malformed", m));
    let v: Value = serde_json::from_str(line).map_err(|e| malformed(0, e.to_string()))?;
    let Value::Object(mut obj) = v else {
        return Err(malformed(0, "request must be a JSON object".into()));
    };
    let id = match obj.get("id").and_then(Value::as_u64) {
        Some(id) => id,
        None => return Err(malformed(0, "missing or non-integer id".into())),
    };
    let cmd = match obj.remove("cmd") {
        Some(Value::String(c)) => c,
        _ => return Err(malformed(id, "missing cmd".into())),
    };
    let args = match obj.remove("args") {
        None | Some(Value::Null) => Value::Object(Map::new()),
        Some(a @ Value::Object(_)) => a,
        Some(_) => return Err(malformed(id, "args must be an object".into())),
    };
    Ok(Request { id, cmd, args })
}

fn args<T: DeserializeOwned>(v: &Value) -> Result<T, ErrorBody> {
    serde_json::from_value(v.clone()).map_err(|e| ErrorBody::new("bad_args", e.to_string()))
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("value serializes")
}

fn plan_error(e: PlanError) -> ErrorBody {
    let code = match e {
        PlanError::UnparseableClause(_) => "unparseable_clause",
        PlanError::UnknownAgent(_) => "unknown_agent",
        _ => "plan_error",
    };
    ErrorBody::new(code, e.to_string())
}

fn env_error(e: crate::env::EnvError) -> ErrorBody {
    use crate::env::EnvError::*;
    let code = match e {
        ScenarioInvalid(_) => "bad_scenario",
        UnknownAgent(_) => "unknown_agent",
        MalformedAction(_) => "bad_action",
        Busy(_) => "busy",
    };
    ErrorBody::new(code, e.to_string())
}

#[derive(Debug, Clone)]
struct TaskEntry {
    family: MetricFamily,
    monitor: Option<EpisodeMonitor>,
    record: Option<EpisodeRecord>,
    agent: u64,
}

impl TaskEntry {
    fn record(&self) -> Option<&EpisodeRecord> {
        self.record.as_ref().or_else(|| self.monitor.as_ref().and_then(|m| m.record.as_ref()))
    }
}

/// The world plus everything driving it, behind the command set.
pub struct Session {
    map: Option<CityMap>,
    scenario: ScenarioConfig,
    world: Option<World>,
    buffer: ActionBuffer,
    mode: StepMode,
    interval: f64,
    programs: BTreeMap<u64, PlanProgram>,
    economy: Option<Economy>,
    fleet: Option<GreedyFleet>,
    tasks: BTreeMap<u64, TaskEntry>,
    next_task: u64,
    task_config: TaskConfig,
    vocab: Vocabulary,
}

impl Default for Session {
    fn default() -> Self {
        Self::empty()
    }
}

impl Session {
    /// A session with no world; `world.load` must come first.
    pub fn empty() -> Self {
        Self {
            map: None,
            scenario: ScenarioConfig::default(),
            world: None,
            buffer: ActionBuffer::new(),
            mode: StepMode::Sync,
            interval: 0.1,
            programs: BTreeMap::new(),
            economy: None,
            fleet: None,
            tasks: BTreeMap::new(),
            next_task: 1,
            task_config: TaskConfig::default(),
            vocab: Vocabulary::default(),
        }
    }

    /// A session with `map` loaded under `scenario`.
    pub fn new(map: CityMap, scenario: ScenarioConfig) -> Result<Self, ErrorBody> {
        let mut s = Self::empty();
        s.load(map, scenario)?;
        Ok(s)
    }

    pub fn world(&self) -> Option<&World> {
        self.world.as_ref()
    }

    pub fn mode(&self) -> StepMode {
        self.mode
    }

    /// Wall-clock period between async ticks, when running asynchronously.
    pub fn async_period(&self) -> Option<Duration> {
        (self.mode == StepMode::Async && self.world.is_some()).then(|| Duration::from_secs_f64(self.interval))
    }

    /// Handles one raw line and returns the response line (without newline).
    pub fn handle_line(&mut self, line: &str) -> String {
        match parse_request(line) {
            Ok(req) => self.handle(&req).to_line(),
            Err(resp) => resp.to_line(),
        }
    }

    pub fn handle(&mut self, req: &Request) -> Response {
        match self.dispatch(&req.cmd, &req.args) {
            Ok(v) => Response::ok(req.id, v),
            Err(e) => Response::err(req.id, e),
        }
    }

    fn dispatch(&mut self, cmd: &str, a: &Value) -> CmdResult {
        match cmd {
            "world.load" => self.cmd_load(a),
            "world.reset" => self.cmd_reset(a),
            "world.info" => self.info(),
            "scene.query" => self.cmd_query(a),
            "scene.edit" => self.cmd_edit(a),
            "agent.register" => self.cmd_register(a),
            "agent.observe" => self.cmd_observe(a),
            "agent.act" => self.cmd_act(a),
            "agent.plan" => self.cmd_plan(a),
            "task.start" => self.cmd_task_start(a),
            "task.status" => self.cmd_task_status(a),
            "metrics.export" => self.cmd_metrics(a),
            "sim.step" => self.cmd_step(a),
            "sim.run" => self.cmd_run(a),
            other => Err(ErrorBody::new("unknown_command", format!("unknown command {other:?}"))),
        }
    }

    fn world_ref(&self) -> Result<&World, ErrorBody> {
        self.world.as_ref().ok_or_else(|| ErrorBody::new("no_world", "no world loaded"))
    }

    fn world_mut(&mut self) -> Result<&mut World, ErrorBody> {
        self.world.as_mut().ok_or_else(|| ErrorBody::new("no_world", "no world loaded"))
    }

    fn load(&mut self, map: CityMap, scenario: ScenarioConfig) -> Result<(), ErrorBody> {
        let (world, _) = World::reset(&map, &scenario).map_err(env_error)?;
        self.map = Some(map);
        self.mode = scenario.mode;
        self.interval = scenario.interval;
        self.scenario = scenario;
        self.install(world);
        Ok(())
    }

    fn install(&mut self, world: World) {
        self.buffer = ActionBuffer::new();
        self.buffer.sync_availability(&world);
        self.world = Some(world);
        self.programs.clear();
        self.economy = None;
        self.fleet = None;
        self.tasks.clear();
        self.next_task = 1;
    }

    fn cmd_load(&mut self, a: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct LoadArgs {
            #[serde(default)]
            scenario: Option<ScenarioConfig>,
            #[serde(default)]
            map: Option<CityMap>,
            #[serde(default)]
            map_path: Option<String>,
            #[serde(default)]
            generate: Option<GenConfig>,
        }
        let la: LoadArgs = args(a)?;
        let scenario = la.scenario.unwrap_or_else(|| self.scenario.clone());
        let sources = la.map.is_some() as u8 + la.map_path.is_some() as u8 + la.generate.is_some() as u8;
        if sources > 1 {
            return Err(ErrorBody::new("bad_args", "give at most one of map, map_path, generate"));
        }
        let map = if let Some(m) = la.map {
            m
        } else if let Some(p) = la.map_path.or_else(|| scenario.map_ref.clone()) {
            CityMap::load(std::path::Path::new(&p)).map_err(|e| ErrorBody::new("bad_map", e.to_string()))?
        } else if let Some(g) = la.generate {
            procgen::generate_city(&g).map_err(|e| ErrorBody::new("bad_map", e.to_string()))?.0
        } else {
            self.map.clone().ok_or_else(|| ErrorBody::new("bad_args", "no map given and none loaded"))?
        };
        self.load(map, scenario)?;
        self.info()
    }

    fn cmd_reset(&mut self, a: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct ResetArgs {
            #[serde(default)]
            seed: Option<u64>,
        }
        let ra: ResetArgs = args(a)?;
        let map = self.map.clone().ok_or_else(|| ErrorBody::new("no_world", "no world loaded"))?;
        let mut scenario = self.scenario.clone();
        if let Some(s) = ra.seed {
            scenario.seed = s;
        }
        self.load(map, scenario)?;
        self.info()
    }

    fn info(&self) -> CmdResult {
        let w = self.world_ref()?;
        let ids: Vec<u64> = w.agents.keys().copied().collect();
        Ok(json!({
            "extent": w.scene.extent(),
            "tick": w.tick,
            "seed": self.scenario.seed,
            "mode": self.mode,
            "interval": self.interval,
            "agent_count": ids.len(),
            "agents": ids,
            "entities": w.scene.len(),
            "coarse_waypoints": w.waypoints.coarse.len(),
            "fine_waypoints": w.waypoints.fine.len(),
            "economy": self.economy.is_some(),
        }))
    }

    fn cmd_query(&mut self, a: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Nearest {
            x: f64,
            y: f64,
            category: Category,
            #[serde(default)]
            tag: Option<String>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct QueryArgs {
            #[serde(default)]
            nearest: Option<Nearest>,
            #[serde(default)]
            region: Option<Aabb>,
            #[serde(default)]
            id: Option<u64>,
        }
        let q: QueryArgs = args(a)?;
        let w = self.world_ref()?;
        match (q.nearest, q.region, q.id) {
            (Some(n), None, None) => {
                let e = w.scene.nearest(Vec2::new(n.x, n.y), n.category, n.tag.as_deref()).map_err(|e| ErrorBody::new("not_found", e.to_string()))?;
                Ok(json!({ "entities": [e] }))
            }
            (None, Some(r), None) => {
                let mut es = w.scene.query_region(&r);
                es.sort_by_key(|e| e.id);
                Ok(json!({ "entities": es }))
            }
            (None, None, Some(id)) => {
                if let Some(e) = w.scene.get(EntityId(id)) {
                    return Ok(json!({ "entities": [e] }));
                }
                let a = w.agent(id).map_err(|_| ErrorBody::new("not_found", format!("no entity {id}")))?;
                Ok(json!({ "agents": [a] }))
            }
            _ => Err(ErrorBody::new("bad_args", "give exactly one of nearest, region, id")),
        }
    }

    fn cmd_edit(&mut self, a: &Value) -> CmdResult {
        let cmd: SceneEditCommand = match a.get("cmd") {
            Some(c) => args(c)?,
            None => args(a)?,
        };
        let id = self.world_mut()?.edit_scene(&cmd).map_err(|e| ErrorBody::new("scene_error", e.to_string()))?;
        Ok(json!({ "id": id }))
    }

    fn cmd_register(&mut self, a: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RegisterArgs {
            embodiment: Embodiment,
            #[serde(default, alias = "spawn_waypoint")]
            spawn: Option<WaypointId>,
            #[serde(default)]
            yaw: Option<f64>,
            #[serde(default)]
            vitals: Option<Vitals>,
        }
        let ra: RegisterArgs = args(a)?;
        let w = self.world_mut()?;
        let make = |spawn_waypoint| AgentSpawn { embodiment: ra.embodiment, spawn_waypoint, yaw: ra.yaw, vitals: ra.vitals };
        let (spawn, id) = match ra.spawn {
            Some(s) => (make(s), w.register_agent(&make(s)).map_err(env_error)?),
            None => {
                // First free waypoint of the right kind, in id order.
                let want = if ra.embodiment == Embodiment::Vehicle { Mode::Vehicle } else { Mode::Pedestrian };
                let candidates: Vec<WaypointId> =
                    w.waypoints.fine.nodes().iter().filter(|n| n.kind.mode() == want && !w.static_blocked.contains(&n.id)).map(|n| n.id).collect();
                candidates
                    .into_iter()
                    .find_map(|c| w.register_agent(&make(c)).ok().map(|id| (make(c), id)))
                    .ok_or_else(|| ErrorBody::new("bad_args", "no free spawn waypoint"))?
            }
        };
        // Reset rebuilds the same agents with the same ids.
        self.scenario.agents.push(spawn);
        let w = self.world.as_mut().expect("world checked above");
        if let Some(e) = self.economy.as_mut() {
            e.register(w, id).map_err(|e| ErrorBody::new("task_error", e.to_string()))?;
        }
        self.buffer.sync_availability(w);
        let a = w.agent(id).map_err(env_error)?;
        Ok(json!({ "id": id, "pose": a.pose }))
    }

    fn cmd_observe(&mut self, a: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct ObserveArgs {
            id: u64,
            #[serde(default)]
            raster: bool,
        }
        let oa: ObserveArgs = args(a)?;
        let w = self.world_mut()?;
        let obs = w.observe(oa.id).map_err(env_error)?;
        let raster = if oa.raster { Some(obs.local_raster.clone().unwrap_or_else(|| w.raster(&w.agents[&oa.id]))) } else { None };
        let mut v = to_value(&obs);
        let o = v.as_object_mut().expect("observation is an object");
        o.remove("local_raster");
        if let Some(r) = raster {
            o.insert(
                "local_raster".into(),
                json!({
                    "width": r.width,
                    "height": r.height,
                    "cell": r.cell,
                    "data_b64": base64::engine::general_purpose::STANDARD.encode(&r.data),
                }),
            );
        }
        if let Some(p) = self.programs.get(&oa.id) {
            o.insert("program".into(), to_value(&p.status));
        }
        Ok(v)
    }

    fn cmd_act(&mut self, a: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct ActArgs {
            id: u64,
            action: Value,
        }
        let aa: ActArgs = args(a)?;
        let action = match aa.action {
            Value::String(s) => json!({ "verb": s }),
            v => v,
        };
        let verb: Verb = serde_json::from_value(action).map_err(|e| ErrorBody::new("bad_action", e.to_string()))?;
        verb.validate().map_err(env_error)?;
        let w = self.world_ref()?;
        w.agent(aa.id).map_err(env_error)?;
        if self.programs.get(&aa.id).is_some_and(|p| !p.is_finished()) {
            return Err(ErrorBody::new("busy", format!("agent {} is running a plan", aa.id)));
        }
        let cmd = ActionCommand::new(aa.id, verb);
        match self.mode {
            StepMode::Async => {
                self.buffer.submit(cmd).map_err(env_error)?;
                Ok(json!({ "accepted": true, "tick": w.tick }))
            }
            StepMode::Sync => {
                self.tick_once(Some(cmd))?;
                let w = self.world_ref()?;
                Ok(json!({ "tick": w.tick, "feedback": w.feedback.get(&aa.id) }))
            }
        }
    }

    fn cmd_plan(&mut self, a: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct PlanArgs {
            id: u64,
            #[serde(default)]
            command: Option<String>,
            #[serde(default)]
            plan: Option<Value>,
        }
        let pa: PlanArgs = args(a)?;
        let plan = match (pa.command, pa.plan) {
            (Some(text), None) | (None, Some(Value::String(text))) => planner::parse(&text, &self.vocab).map_err(plan_error)?,
            (None, Some(v)) => serde_json::from_value::<HighLevelPlan>(v).map_err(|e| ErrorBody::new("bad_args", e.to_string()))?,
            _ => return Err(ErrorBody::new("bad_args", "give exactly one of command, plan")),
        };
        let w = self.world_ref()?;
        let prog = planner::expand_rule_based(&plan, w, pa.id, &self.vocab).map_err(plan_error)?;
        let out = json!({ "id": pa.id, "actions": prog.queue.len(), "plan": plan, "program": prog.status });
        self.programs.insert(pa.id, prog);
        Ok(out)
    }

    fn cmd_task_start(&mut self, a: &Value) -> CmdResult {
        let kind = a.get("kind").and_then(Value::as_str).ok_or_else(|| ErrorBody::new("bad_args", "missing kind"))?;
        let mut params = a.clone();
        params.as_object_mut().expect("args are an object").remove("kind");
        match kind {
            "delivery" => self.start_delivery(&params),
            "nav" => self.start_nav(&params),
            "search" => self.start_search(&params),
            other => Err(ErrorBody::new("bad_args", format!("unknown task kind {other:?}"))),
        }
    }

    fn start_delivery(&mut self, p: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct DeliveryArgs {
            #[serde(default)]
            economy: EconomyConfig,
            #[serde(default = "yes")]
            fleet: bool,
        }
        fn yes() -> bool {
            true
        }
        let da: DeliveryArgs = args(p)?;
        let seed = self.scenario.seed;
        let w = self.world.as_mut().ok_or_else(|| ErrorBody::new("no_world", "no world loaded"))?;
        let task_err = |e: crate::delivery::DeliveryError| ErrorBody::new("task_error", e.to_string());
        let mut econ = Economy::new(da.economy, seed, w).map_err(task_err)?;
        let ids: Vec<u64> = w.agents.keys().copied().collect();
        for &id in &ids {
            econ.register(w, id).map_err(task_err)?;
        }
        let tick = w.tick;
        econ.spawn_orders(w, tick);
        self.economy = Some(econ);
        self.fleet = da.fleet.then(|| GreedyFleet::new(seed, &ids));
        Ok(json!({ "agents": ids, "fleet": da.fleet }))
    }

    fn add_task(&mut self, entry: TaskEntry) -> CmdResult {
        let id = self.next_task;
        self.next_task += 1;
        let out = json!({ "task_id": id, "record": entry.record() });
        self.tasks.insert(id, entry);
        Ok(out)
    }

    fn start_nav(&mut self, p: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct NavArgs {
            agent: u64,
            #[serde(default)]
            task: Option<NavTask>,
            #[serde(default)]
            goal: Option<WaypointId>,
            #[serde(default)]
            goal_yaw: f64,
            #[serde(default)]
            time_limit: Option<u64>,
            /// Drive the agent with the built-in planner until the episode ends.
            #[serde(default)]
            autopilot: bool,
        }
        let na: NavArgs = args(p)?;
        let cfg = self.task_config.clone();
        let task_id = self.next_task;
        let w = self.world.as_mut().ok_or_else(|| ErrorBody::new("no_world", "no world loaded"))?;
        w.agent(na.agent).map_err(env_error)?;
        let task_err = |e: tasks::TaskError| ErrorBody::new("task_error", e.to_string());
        let task = match (na.task, na.goal) {
            (Some(t), None) => t,
            (None, Some(goal)) => {
                let start = w.nearest_waypoint(na.agent).ok_or_else(|| ErrorBody::new("task_error", "agent is off the graph"))?;
                NavTask {
                    id: task_id,
                    difficulty: tasks::Difficulty::Easy,
                    route: vec![],
                    start,
                    goal,
                    goal_yaw: na.goal_yaw,
                    subtasks: None,
                    time_limit: na.time_limit.unwrap_or(cfg.min_time_limit),
                    obstacle_mode: false,
                    pedestrians: false,
                }
            }
            _ => return Err(ErrorBody::new("bad_args", "give exactly one of task, goal")),
        };
        let family = if task.subtasks.is_some() { MetricFamily::Multimodal } else { MetricFamily::Navigation };
        let entry = if na.autopilot {
            let rec = tasks::run_nav_episode(w, na.agent, &task, &cfg).map_err(task_err)?;
            TaskEntry { family, monitor: None, record: Some(rec), agent: na.agent }
        } else {
            let judge = Judge::Navigation { goal: task.goal, goal_yaw: task.goal_yaw };
            let m = EpisodeMonitor::new(w, task.id, na.agent, judge, na.time_limit.unwrap_or(task.time_limit)).map_err(task_err)?;
            TaskEntry { family, monitor: Some(m), record: None, agent: na.agent }
        };
        self.add_task(entry)
    }

    fn start_search(&mut self, p: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct SearchArgs {
            agent: u64,
            other: u64,
            #[serde(default)]
            time_limit: Option<u64>,
            #[serde(default)]
            autopilot: bool,
        }
        let sa: SearchArgs = args(p)?;
        let cfg = self.task_config.clone();
        let task_id = self.next_task;
        let limit = sa.time_limit.unwrap_or(cfg.min_time_limit);
        let w = self.world.as_mut().ok_or_else(|| ErrorBody::new("no_world", "no world loaded"))?;
        let task_err = |e: tasks::TaskError| ErrorBody::new("task_error", e.to_string());
        let entry = if sa.autopilot {
            let mut rec = tasks::run_search_episode(w, sa.agent, sa.other, limit, &cfg).map_err(task_err)?;
            rec.task_id = task_id;
            TaskEntry { family: MetricFamily::Search, monitor: None, record: Some(rec), agent: sa.agent }
        } else {
            let m = EpisodeMonitor::new(w, task_id, sa.agent, Judge::Search { other: sa.other }, limit).map_err(task_err)?;
            TaskEntry { family: MetricFamily::Search, monitor: Some(m), record: None, agent: sa.agent }
        };
        self.add_task(entry)
    }

    fn cmd_task_status(&mut self, a: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct StatusArgs {
            #[serde(default, alias = "id")]
            agent: Option<u64>,
            #[serde(default)]
            task_id: Option<u64>,
        }
        let sa: StatusArgs = args(a)?;
        let w = self.world_ref()?;
        let programs: BTreeMap<u64, Value> =
            self.programs.iter().filter(|(id, _)| sa.agent.is_none_or(|a| a == **id)).map(|(id, p)| (*id, to_value(&p.status))).collect();
        let tasks: Vec<Value> = self
            .tasks
            .iter()
            .filter(|(tid, t)| sa.task_id.is_none_or(|x| x == **tid) && sa.agent.is_none_or(|a| a == t.agent))
            .map(|(tid, t)| {
                json!({
                    "task_id": tid,
                    "agent": t.agent,
                    "family": t.family,
                    "finished": t.record().is_some(),
                    "record": t.record(),
                })
            })
            .collect();
        let mut out = json!({ "tick": w.tick, "programs": programs, "tasks": tasks });
        if let Some(id) = sa.agent {
            out["program"] = self.programs.get(&id).map_or(Value::Null, |p| to_value(&p.status));
        }
        if let Some(e) = &self.economy {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for o in e.orders.values() {
                *counts.entry(o.state.name()).or_default() += 1;
            }
            out["orders"] = to_value(&counts);
        }
        Ok(out)
    }

    fn cmd_metrics(&mut self, a: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct MetricsArgs {
            kind: String,
            #[serde(default)]
            model: Option<String>,
        }
        let ma: MetricsArgs = args(a)?;
        self.world_ref()?;
        let family = match ma.kind.as_str() {
            "delivery" => {
                let e = self.economy.as_ref().ok_or_else(|| ErrorBody::new("task_error", "no delivery task running"))?;
                let report = e.report();
                return Ok(json!({ "csv": report.to_csv(ma.model.as_deref().unwrap_or("scripted")), "report": report }));
            }
            "navigation" => MetricFamily::Navigation,
            "multimodal" => MetricFamily::Multimodal,
            "search" => MetricFamily::Search,
            other => return Err(ErrorBody::new("bad_args", format!("unknown metrics kind {other:?}"))),
        };
        let records: Vec<EpisodeRecord> = self.tasks.values().filter(|t| t.family == family).filter_map(|t| t.record().cloned()).collect();
        let report = tasks::compute_metrics(&records, family);
        Ok(json!({ "csv": report.to_csv(), "report": report, "records": records.len() }))
    }

    fn cmd_step(&mut self, a: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct StepArgs {
            #[serde(default = "one")]
            n: u64,
        }
        fn one() -> u64 {
            1
        }
        let sa: StepArgs = args(a)?;
        if sa.n > MAX_STEP {
            return Err(ErrorBody::new("bad_args", format!("n must be at most {MAX_STEP}")));
        }
        let w = self.world_ref()?;
        let events = w.log.events.len();
        for _ in 0..sa.n {
            self.tick_once(None)?;
        }
        let w = self.world_ref()?;
        Ok(json!({ "tick": w.tick, "events": w.log.events.len() - events }))
    }

    fn cmd_run(&mut self, a: &Value) -> CmdResult {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RunArgs {
            mode: StepMode,
            #[serde(default)]
            interval: Option<f64>,
        }
        let ra: RunArgs = args(a)?;
        let interval = ra.interval.unwrap_or(self.interval);
        if !(interval > 0.0 && interval.is_finite()) {
            return Err(ErrorBody::new("bad_args", "interval must be positive"));
        }
        let w = self.world.as_ref().ok_or_else(|| ErrorBody::new("no_world", "no world loaded"))?;
        self.buffer.sync_availability(w);
        let tick = w.tick;
        self.mode = ra.mode;
        self.interval = interval;
        Ok(json!({ "mode": self.mode, "interval": self.interval, "tick": tick }))
    }

    /// One world tick: planner programs and the delivery fleet act alongside
    /// `forced`; in async mode everything goes through the action buffer.
    pub fn advance(&mut self) -> Result<(), ErrorBody> {
        self.tick_once(None)
    }

    fn tick_once(&mut self, forced: Option<ActionCommand>) -> Result<(), ErrorBody> {
        let w = self.world.as_mut().ok_or_else(|| ErrorBody::new("no_world", "no world loaded"))?;
        let mut cmds: BTreeMap<u64, ActionCommand> = BTreeMap::new();
        if let Some(c) = forced {
            cmds.insert(c.agent_id, c);
        }
        for (id, prog) in self.programs.iter_mut() {
            if prog.is_finished() || cmds.contains_key(id) || (self.mode == StepMode::Async && !self.buffer.is_available(*id)) {
                continue;
            }
            loop {
                match planner::tick_executor(prog, w) {
                    ExecStep::Primitive(c) => {
                        cmds.insert(*id, c);
                        break;
                    }
                    ExecStep::Hook { verb, args } => {
                        let res = match self.economy.as_mut() {
                            Some(e) => DeliveryAction::from_hook(&verb, &args).and_then(|act| e.apply(w, *id, &act)).map_err(|e| e.to_string()),
                            None => Err(format!("{verb} needs a running delivery task")),
                        };
                        if let Err(m) = res {
                            prog.status = planner::ProgramStatus::Failed(m);
                            break;
                        }
                    }
                    ExecStep::Idle => break,
                }
            }
        }
        if let (Some(fleet), Some(econ)) = (self.fleet.as_mut(), self.economy.as_mut()) {
            for c in fleet.act(econ, w) {
                cmds.entry(c.agent_id).or_insert(c);
            }
        }
        match self.mode {
            StepMode::Sync => {
                let all = w.fill_idle(&cmds.into_values().collect::<Vec<_>>());
                w.step_sync(&all).map_err(env_error)?;
            }
            StepMode::Async => {
                for c in cmds.into_values() {
                    // An agent with a buffered action already keeps it.
                    let _ = self.buffer.submit(c);
                }
                w.async_tick(&self.buffer);
            }
        }
        if let Some(e) = self.economy.as_mut() {
            e.step_economy(w);
        }
        for t in self.tasks.values_mut() {
            if let Some(m) = t.monitor.as_mut() {
                m.observe(w, &self.task_config);
            }
        }
        Ok(())
    }
}

/// Outgoing line for a connection; `counted` ones release a pending slot once written.
struct Outgoing {
    line: String,
    counted: bool,
}

struct Job {
    line: String,
    reply: Sender<Outgoing>,
}

/// Runs the protocol on `listener` until the process exits.
pub fn serve(listener: TcpListener, session: Session) -> std::io::Result<()> {
    let (tx, rx) = mpsc::channel::<Job>();
    std::thread::spawn(move || executor(session, rx));
    for stream in listener.incoming() {
        match stream {
            Ok(s) => {
                let tx = tx.clone();
                std::thread::spawn(move || connection(s, tx));
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
    Ok(())
}

/// Binds `addr` and serves in a background thread. Returns the bound address.
pub fn spawn_server(addr: &str, session: Session) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    std::thread::spawn(move || serve(listener, session));
    Ok(local)
}

fn executor(mut session: Session, rx: Receiver<Job>) {
    let mut next_tick = std::time::Instant::now();
    loop {
        let job = match session.async_period() {
            None => match rx.recv() {
                Ok(j) => Some(j),
                Err(_) => return,
            },
            Some(period) => {
                let now = std::time::Instant::now();
                if now >= next_tick {
                    if let Err(e) = session.advance() {
                        log::warn!("async tick failed: {}", e.message);
                    }
                    next_tick = now + period;
                }
                match rx.recv_timeout(next_tick.saturating_duration_since(std::time::Instant::now())) {
                    Ok(j) => Some(j),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => return,
                }
            }
        };
        if let Some(job) = job {
            let line = session.handle_line(&job.line);
            // The connection may be gone; its agents stay.
            let _ = job.reply.send(Outgoing { line, counted: true });
        }
    }
}

fn connection(stream: TcpStream, jobs: Sender<Job>) {
    let peer = stream.peer_addr().ok();
    let Ok(write_half) = stream.try_clone() else { return };
    let pending = Arc::new(AtomicUsize::new(0));
    let (out_tx, out_rx) = mpsc::channel::<Outgoing>();
    let writer_pending = Arc::clone(&pending);
    let writer = std::thread::spawn(move || {
        let mut w = std::io::BufWriter::new(write_half);
        for out in out_rx {
            let ok = writeln!(w, "{}", out.line).and_then(|_| w.flush()).is_ok();
            if out.counted {
                writer_pending.fetch_sub(1, Ordering::SeqCst);
            }
            if !ok {
                break;
            }
        }
    });
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        let line = String::from_utf8_lossy(&buf);
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        if pending.load(Ordering::SeqCst) >= MAX_PENDING {
            let id = parse_request(line).map_or_else(|r| r.id, |r| r.id);
            let resp = Response::err(id, ErrorBody::new("overloaded", format!("more than {MAX_PENDING} requests pending")));
            let _ = out_tx.send(Outgoing { line: resp.to_line(), counted: false });
            continue;
        }
        pending.fetch_add(1, Ordering::SeqCst);
        if jobs.send(Job { line: line.to_string(), reply: out_tx.clone() }).is_err() {
            break;
        }
    }
    drop(out_tx);
    let _ = writer.join();
    log::debug!("connection {peer:?} closed");
}
