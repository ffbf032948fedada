//! Task suites and their metrics: physical-reasoning navigation over the
//! coarse graph, multimodal navigation decomposed into subtasks, two-robot
//! search, episode records and every metric formula over them.

use crate::env::{ActionCommand, EnvConfig, Verb, World};
use crate::geometry::{angle_diff, Pose2D, Vec2};
use crate::planner::{self, ExecStep, HighLevelPlan, PlanStep, TargetSpec, Vocabulary};
use crate::procgen::CityMap;
use crate::rng::SimRng;
use crate::traffic;
use crate::waypoints::{self, path_length, Mode, WaypointGraph, WaypointId, WaypointKind, Waypoints};
use crate::world_model::{Category, SceneEntity, SceneGraph};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Map;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskError {
    #[error("infeasible map: {0}")]
    InfeasibleMap(String),
    #[error("no path: {0}")]
    NoPath(String),
    #[error("unknown entity {0}")]
    UnknownEntity(u64),
}

/// Thresholds for judging and running tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    /// Navigation success radius around the goal, meters.
    pub goal_range: f64,
    pub yaw_tolerance_deg: f64,
    /// Search success: the other robot inside the viewer's raster within this range.
    pub see_range: f64,
    /// Trailing window for stuck detection, ticks.
    pub stuck_window: u64,
    /// Minimum net displacement over the window, meters.
    pub stuck_displacement: f64,
    /// Time limit = max(min_time_limit, time_factor * route meters / step).
    pub time_factor: f64,
    pub min_time_limit: u64,
    pub max_attempts: usize,
    /// Buildings within this distance of a straight run can name it.
    pub landmark_radius: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            goal_range: 3.0,
            yaw_tolerance_deg: 30.0,
            see_range: 20.0,
            stuck_window: 1200,
            stuck_displacement: 1.0,
            time_factor: 3.0,
            min_time_limit: 1200,
            max_attempts: 5000,
            landmark_radius: 20.0,
        }
    }
}

/// Static view of a city for task generation.
#[derive(Debug, Clone)]
pub struct TaskMap {
    pub scene: SceneGraph,
    pub waypoints: Waypoints,
    pub blocked: BTreeSet<WaypointId>,
}

impl TaskMap {
    pub fn new(map: &CityMap) -> Result<Self, TaskError> {
        let waypoints = Waypoints::build(&map.roads, &map.config.layout).map_err(|e| TaskError::InfeasibleMap(e.to_string()))?;
        let blocked = traffic::blocked_waypoints(&map.scene, &waypoints.fine, EnvConfig::default().humanoid_size / 2.0);
        Ok(Self { scene: map.scene.clone(), waypoints, blocked })
    }

    pub fn from_world(world: &World) -> Self {
        Self { scene: world.scene.clone(), waypoints: world.waypoints.clone(), blocked: world.static_blocked.clone() }
    }

    /// Nearest free sidewalk waypoint to a building's footprint center.
    pub fn front_door(&self, entity: u64) -> Result<WaypointId, TaskError> {
        let e = self.entity(entity)?;
        self.waypoints
            .fine
            .nearest_where(e.footprint.center(), |w| w.kind == WaypointKind::FineSidewalk && !self.blocked.contains(&w.id))
            .ok_or_else(|| TaskError::InfeasibleMap("no free sidewalk".into()))
    }

    fn entity(&self, id: u64) -> Result<&SceneEntity, TaskError> {
        self.scene.get(crate::world_model::EntityId(id)).ok_or(TaskError::UnknownEntity(id))
    }

    fn landmarks(&self) -> Vec<&SceneEntity> {
        self.scene.entities().filter(|e| e.category == Category::Building && e.has_tag("landmark")).collect()
    }

    /// Free fine waypoint closest to a coarse node.
    pub fn fine_near(&self, coarse: WaypointId) -> Option<WaypointId> {
        let p = self.waypoints.coarse.position(coarse);
        self.waypoints.fine.nearest_where(p, |w| w.kind == WaypointKind::FineSidewalk && !self.blocked.contains(&w.id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    Dynamic,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard, Difficulty::Dynamic];

    /// Inclusive range of road segments a route may touch.
    pub fn segment_range(self) -> (usize, usize) {
        match self {
            Difficulty::Easy => (1, 2),
            Difficulty::Medium | Difficulty::Dynamic => (3, 4),
            Difficulty::Hard => (5, usize::MAX),
        }
    }

    /// Hard and dynamic tasks run on maps generated in obstacle-task mode.
    pub fn obstacle_mode(self) -> bool {
        matches!(self, Difficulty::Hard | Difficulty::Dynamic)
    }

    pub fn pedestrians(self) -> bool {
        self == Difficulty::Dynamic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTaskKind {
    OrientationAlignment,
    MoveAlongRoad,
    TurningAtIntersection,
    ReachDestination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTask {
    pub kind: SubTaskKind,
    /// Ground-truth goal: a fine waypoint and the yaw to hold there.
    pub goal: WaypointId,
    pub goal_yaw: f64,
    pub instruction: String,
    pub landmark: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<Turn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavTask {
    pub id: u64,
    pub difficulty: Difficulty,
    /// Coarse route for physical tasks, fine path for multimodal ones.
    pub route: Vec<WaypointId>,
    pub start: WaypointId,
    pub goal: WaypointId,
    pub goal_yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtasks: Option<Vec<SubTask>>,
    pub time_limit: u64,
    pub obstacle_mode: bool,
    pub pedestrians: bool,
}

/// Distinct road segments a route touches.
pub fn route_segments(g: &WaypointGraph, route: &[WaypointId]) -> usize {
    route.iter().filter_map(|w| g.node(*w).segment_id).collect::<BTreeSet<_>>().len()
}

fn time_limit(cfg: &TaskConfig, meters: f64) -> u64 {
    let step = EnvConfig::default().humanoid_step;
    ((cfg.time_factor * meters / step).ceil() as u64).max(cfg.min_time_limit)
}

fn hop_yaw(g: &WaypointGraph, route: &[WaypointId]) -> f64 {
    match route {
        [.., a, b] => g.position(*b).sub(g.position(*a)).angle(),
        _ => 0.0,
    }
}

/// Samples `count_per_level` tasks for each difficulty, in level order.
/// Start and goal are coarse sidewalk midpoints; the route is the coarse A*
/// path, and the level bounds how many segments it touches.
pub fn gen_physical_tasks(map: &TaskMap, count_per_level: usize, cfg: &TaskConfig, rng: &mut SimRng) -> Result<Vec<NavTask>, TaskError> {
    let g = &map.waypoints.coarse;
    let mids: Vec<WaypointId> = g.coarse_sidewalks.values().map(|ids| ids[1]).collect();
    if mids.len() < 2 {
        return Err(TaskError::InfeasibleMap("fewer than two sidewalks".into()));
    }
    let mut out = Vec::new();
    for level in Difficulty::ALL {
        let (lo, hi) = level.segment_range();
        let mut seen = BTreeSet::new();
        let mut attempts = 0;
        while seen.len() < count_per_level {
            attempts += 1;
            if attempts > cfg.max_attempts {
                return Err(TaskError::InfeasibleMap(format!("cannot find {count_per_level} {level:?} tasks")));
            }
            let s = mids[rng.random_range(0..mids.len())];
            let t = mids[rng.random_range(0..mids.len())];
            if s == t || seen.contains(&(s, t)) {
                continue;
            }
            let Ok(route) = waypoints::astar(g, s, t, Mode::Pedestrian) else { continue };
            let n = route_segments(g, &route);
            if n < lo || n > hi {
                continue;
            }
            seen.insert((s, t));
            out.push(NavTask {
                id: out.len() as u64 + 1,
                difficulty: level,
                start: s,
                goal: t,
                goal_yaw: hop_yaw(g, &route),
                time_limit: time_limit(cfg, path_length(g, &route)),
                route,
                subtasks: None,
                obstacle_mode: level.obstacle_mode(),
                pedestrians: level.pedestrians(),
            });
        }
    }
    Ok(out)
}

/// Heading of a hop along one sidewalk lane, snapped to the segment axis.
/// Lane changes, crosswalks and junction corners have none.
pub fn along_lane_heading(g: &WaypointGraph, a: WaypointId, b: WaypointId) -> Option<Vec2> {
    let (wa, wb) = (g.node(a), g.node(b));
    let same_lane = wa.kind == WaypointKind::FineSidewalk
        && wb.kind == WaypointKind::FineSidewalk
        && wa.segment_id.is_some()
        && wa.segment_id == wb.segment_id
        && wa.side == wb.side
        && wa.lane_index == wb.lane_index
        && wa.index != wb.index;
    if !same_lane {
        return None;
    }
    let d = wb.position.sub(wa.position);
    Some(if d.x.abs() >= d.y.abs() { Vec2::new(d.x.signum(), 0.0) } else { Vec2::new(0.0, d.y.signum()) })
}

/// A maximal stretch of along-lane hops with one heading.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub heading: Vec2,
    /// Path indices of the first and last waypoint of the stretch.
    pub first: usize,
    pub last: usize,
}

pub fn straight_runs(g: &WaypointGraph, path: &[WaypointId]) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for i in 1..path.len() {
        let Some(h) = along_lane_heading(g, path[i - 1], path[i]) else { continue };
        match runs.last_mut() {
            Some(r) if r.heading == h => r.last = i,
            _ => runs.push(Run { heading: h, first: i - 1, last: i }),
        }
    }
    runs
}

/// Walking path between two buildings' front doors.
pub fn door_path(map: &TaskMap, start: u64, goal: u64) -> Result<Vec<WaypointId>, TaskError> {
    let (s, t) = (map.front_door(start)?, map.front_door(goal)?);
    planner::nav_path(&map.waypoints.fine, &map.blocked, &BTreeSet::new(), s, t).map_err(|e| TaskError::NoPath(e.to_string()))
}

fn describe(e: &SceneEntity) -> String {
    e.tags.iter().find(|t| !matches!(t.as_str(), "landmark" | "street_element")).cloned().unwrap_or_else(|| e.category.as_str().to_string())
}

/// Largest building near a stretch of path, ties to the smaller id.
fn prominent_building<'a>(map: &'a TaskMap, pts: &[Vec2], radius: f64, exclude: &[u64]) -> Option<&'a SceneEntity> {
    let (mut lo, mut hi) = (pts[0], pts[0]);
    for p in pts {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let region = crate::geometry::Aabb::new(lo.x, lo.y, hi.x, hi.y).expanded(radius);
    map.scene
        .query_region(&region)
        .into_iter()
        .filter(|e| e.category == Category::Building && !exclude.contains(&e.id.0))
        .filter(|e| pts.iter().any(|p| e.footprint.distance_to_point(*p) <= radius))
        .max_by(|a, b| a.footprint.area().total_cmp(&b.footprint.area()).then(b.id.0.cmp(&a.id.0)))
}

fn turn_of(prev: Vec2, next: Vec2, offset: Vec2) -> Turn {
    let c = prev.x * next.y - prev.y * next.x;
    let c = if c.abs() > 1e-9 { c } else { prev.x * offset.y - prev.y * offset.x };
    if c > 0.0 {
        Turn::Left
    } else {
        Turn::Right
    }
}

/// Decomposes the walk between two landmark buildings: align, then straight
/// runs separated by a turn at every heading change, then arrive.
pub fn gen_multimodal_subtasks(map: &TaskMap, start: u64, goal: u64, cfg: &TaskConfig) -> Result<Vec<SubTask>, TaskError> {
    let path = door_path(map, start, goal)?;
    Ok(subtasks_for_path(map, &path, goal, cfg))
}

pub fn subtasks_for_path(map: &TaskMap, path: &[WaypointId], goal_building: u64, cfg: &TaskConfig) -> Vec<SubTask> {
    let g = &map.waypoints.fine;
    let runs = straight_runs(g, path);
    let start = path[0];
    let end = *path.last().unwrap();
    let goal_e = map.entity(goal_building).ok();
    let face_goal = goal_e.map_or(0.0, |e| e.footprint.center().sub(g.position(end)).angle());
    let first_yaw = runs.first().map_or(face_goal, |r| r.heading.angle());
    let mut out = vec![SubTask {
        kind: SubTaskKind::OrientationAlignment,
        goal: start,
        goal_yaw: first_yaw,
        instruction: "Turn to face along the road you will walk.".into(),
        landmark: None,
        turn: None,
    }];
    for (k, r) in runs.iter().enumerate() {
        if k > 0 {
            let prev = &runs[k - 1];
            let offset = g.position(path[r.first]).sub(g.position(path[prev.last]));
            let turn = turn_of(prev.heading, r.heading, offset);
            let word = if turn == Turn::Left { "left" } else { "right" };
            out.push(SubTask {
                kind: SubTaskKind::TurningAtIntersection,
                goal: path[r.first],
                goal_yaw: r.heading.angle(),
                instruction: format!("Turn {word} at the intersection."),
                landmark: None,
                turn: Some(turn),
            });
        }
        let pts: Vec<Vec2> = path[r.first..=r.last].iter().map(|w| g.position(*w)).collect();
        let landmark = prominent_building(map, &pts, cfg.landmark_radius, &[goal_building]);
        let instruction = match landmark {
            Some(e) => format!("Walk along the road past the {}.", describe(e)),
            None => "Walk along the road.".into(),
        };
        out.push(SubTask {
            kind: SubTaskKind::MoveAlongRoad,
            goal: path[r.last],
            goal_yaw: r.heading.angle(),
            instruction,
            landmark: landmark.map(|e| e.id.0),
            turn: None,
        });
    }
    let name = goal_e.map_or_else(|| "destination".to_string(), describe);
    out.push(SubTask {
        kind: SubTaskKind::ReachDestination,
        goal: end,
        goal_yaw: face_goal,
        instruction: format!("Stop in front of the {name} and face it."),
        landmark: goal_e.map(|e| e.id.0),
        turn: None,
    });
    out
}

/// Multimodal tasks between random pairs of landmark buildings, labelled by
/// how many segments the walk touches.
pub fn gen_multimodal_tasks(map: &TaskMap, count: usize, cfg: &TaskConfig, rng: &mut SimRng) -> Result<Vec<NavTask>, TaskError> {
    let marks = map.landmarks();
    if marks.len() < 2 {
        return Err(TaskError::InfeasibleMap("fewer than two landmarks".into()));
    }
    let g = &map.waypoints.fine;
    let mut out = Vec::new();
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > cfg.max_attempts {
            return Err(TaskError::InfeasibleMap(format!("cannot find {count} multimodal tasks")));
        }
        let a = marks[rng.random_range(0..marks.len())].id.0;
        let b = marks[rng.random_range(0..marks.len())].id.0;
        if a == b {
            continue;
        }
        let Ok(path) = door_path(map, a, b) else { continue };
        let subtasks = subtasks_for_path(map, &path, b, cfg);
        let n = route_segments(g, &path);
        let difficulty = Difficulty::ALL[..3].iter().copied().find(|d| n <= d.segment_range().1).unwrap_or(Difficulty::Hard);
        let goal_yaw = subtasks.last().unwrap().goal_yaw;
        out.push(NavTask {
            id: out.len() as u64 + 1,
            difficulty,
            start: path[0],
            goal: *path.last().unwrap(),
            goal_yaw,
            time_limit: time_limit(cfg, path_length(g, &path)),
            route: path,
            subtasks: Some(subtasks),
            obstacle_mode: false,
            pedestrians: false,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTask {
    /// Landmark building ids and the front-door pose facing each.
    pub main_memory: Vec<(u64, Pose2D)>,
    pub spawns: [WaypointId; 2],
}

/// Samples up to `n_per_street` landmarks along every street that has one,
/// plus two distinct free spawn waypoints.
pub fn gen_search_task(map: &TaskMap, n_per_street: usize, rng: &mut SimRng) -> Result<SearchTask, TaskError> {
    let g = &map.waypoints.fine;
    let mut by_street: BTreeMap<u32, Vec<(u64, WaypointId)>> = BTreeMap::new();
    for e in map.landmarks() {
        let door = map.front_door(e.id.0)?;
        if let Some(seg) = g.node(door).segment_id {
            by_street.entry(seg.0).or_default().push((e.id.0, door));
        }
    }
    if by_street.is_empty() {
        return Err(TaskError::InfeasibleMap("no street has a landmark".into()));
    }
    let mut main_memory = Vec::new();
    for marks in by_street.values_mut() {
        let k = n_per_street.min(marks.len());
        for _ in 0..k {
            let (id, door) = marks.swap_remove(rng.random_range(0..marks.len()));
            let e = map.entity(id)?;
            let p = g.position(door);
            main_memory.push((id, Pose2D::at(p, e.footprint.center().sub(p).angle())));
        }
    }
    let free: Vec<WaypointId> =
        g.nodes().iter().filter(|w| w.kind == WaypointKind::FineSidewalk && !map.blocked.contains(&w.id)).map(|w| w.id).collect();
    if free.len() < 2 {
        return Err(TaskError::InfeasibleMap("fewer than two free spawn points".into()));
    }
    let a = free[rng.random_range(0..free.len())];
    let b = loop {
        let b = free[rng.random_range(0..free.len())];
        if b != a {
            break b;
        }
    };
    Ok(SearchTask { main_memory, spawns: [a, b] })
}

/// Everything the metric formulas need from one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: u64,
    pub success: bool,
    pub subtasks_total: usize,
    pub subtasks_completed: usize,
    /// Manhattan distance agent to goal at the start and end.
    pub d0: f64,
    pub d_t: f64,
    /// Manhattan inter-agent distance at the start and end (search only).
    #[serde(default)]
    pub inter_d0: Option<f64>,
    #[serde(default)]
    pub inter_d_t: Option<f64>,
    pub collisions_static: u64,
    pub collisions_dynamic: u64,
    pub red_light: u64,
    pub decisions: u64,
    pub fine_waypoints: u64,
    pub stuck: bool,
    pub ticks_used: u64,
}

impl EpisodeRecord {
    pub fn collisions(&self) -> u64 {
        self.collisions_static + self.collisions_dynamic
    }

    pub fn ssr(&self) -> Option<f64> {
        (self.subtasks_total > 0).then(|| self.subtasks_completed as f64 / self.subtasks_total as f64)
    }

    pub fn dp(&self) -> Option<f64> {
        progress(self.d0, self.d_t)
    }

    pub fn tp(&self) -> Option<f64> {
        progress(self.inter_d0?, self.inter_d_t?)
    }
}

/// max((start - end) / start, 0), undefined when the start distance is zero.
pub fn progress(d0: f64, d_t: f64) -> Option<f64> {
    (d0 > 0.0).then(|| ((d0 - d_t) / d0).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFamily {
    Navigation,
    Multimodal,
    Search,
}

/// Aggregate metrics; None marks a formula with an empty denominator or one
/// that does not apply to the family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub family: MetricFamily,
    pub n_total: usize,
    pub n_success: usize,
    pub n_failed: usize,
    pub n_stuck: usize,
    pub sr: Option<f64>,
    pub ssr: Option<f64>,
    pub dp: Option<f64>,
    pub tp: Option<f64>,
    pub csr: Option<f64>,
    pub cc: u64,
    pub cc_static: u64,
    pub cc_dynamic: u64,
    pub cc_s: u64,
    pub rvr: Option<f64>,
    pub str_: Option<f64>,
    pub ndc: Option<f64>,
    pub dss: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Computes every metric over the records. Rates use the success set S;
/// RVR counts successful episodes with at least one red-light crossing.
pub fn compute_metrics(records: &[EpisodeRecord], family: MetricFamily) -> MetricsReport {
    let succ: Vec<&EpisodeRecord> = records.iter().filter(|r| r.success).collect();
    let n_total = records.len();
    let n_success = succ.len();
    let n_failed = n_total - n_success;
    let n_stuck = records.iter().filter(|r| !r.success && r.stuck).count();
    let rate = (n_total > 0).then(|| n_success as f64 / n_total as f64);
    let search = family == MetricFamily::Search;
    MetricsReport {
        family,
        n_total,
        n_success,
        n_failed,
        n_stuck,
        sr: if search { None } else { rate },
        csr: if search { rate } else { None },
        ssr: if family == MetricFamily::Multimodal { mean(records.iter().filter_map(EpisodeRecord::ssr)) } else { None },
        dp: if search { None } else { mean(records.iter().filter_map(EpisodeRecord::dp)) },
        tp: if search { mean(records.iter().filter_map(EpisodeRecord::tp)) } else { None },
        cc: records.iter().map(EpisodeRecord::collisions).sum(),
        cc_static: records.iter().map(|r| r.collisions_static).sum(),
        cc_dynamic: records.iter().map(|r| r.collisions_dynamic).sum(),
        cc_s: succ.iter().map(|r| r.collisions()).sum(),
        rvr: (n_success > 0).then(|| succ.iter().filter(|r| r.red_light > 0).count() as f64 / n_success as f64),
        str_: (n_failed > 0).then(|| n_stuck as f64 / n_failed as f64),
        ndc: mean(succ.iter().filter(|r| r.fine_waypoints > 0).map(|r| r.decisions as f64 / r.fine_waypoints as f64)),
        dss: mean(succ.iter().map(|r| r.decisions as f64)),
    }
}

impl MetricsReport {
    /// `metric,value` rows; undefined values are empty.
    pub fn to_csv(&self) -> String {
        let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
        let rows: [(&str, String); 17] = [
            ("n_total", self.n_total.to_string()),
            ("n_success", self.n_success.to_string()),
            ("n_failed", self.n_failed.to_string()),
            ("n_stuck", self.n_stuck.to_string()),
            ("SR", f(self.sr)),
            ("SSR", f(self.ssr)),
            ("DP", f(self.dp)),
            ("TP", f(self.tp)),
            ("CSR", f(self.csr)),
            ("CC", self.cc.to_string()),
            ("CC_static", self.cc_static.to_string()),
            ("CC_dynamic", self.cc_dynamic.to_string()),
            ("CC-S", self.cc_s.to_string()),
            ("RVR", f(self.rvr)),
            ("STR", f(self.str_)),
            ("NDC", f(self.ndc)),
            ("DSS", f(self.dss)),
        ];
        let mut s = String::from("metric,value\n");
        for (k, v) in rows {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }
}

/// Position and progress of an agent at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrailSample {
    pub tick: u64,
    pub position: Vec2,
    pub subtasks_completed: usize,
}

/// Stuck iff the trail covers the trailing window, the net displacement over
/// it is under `min_displacement` and no subtask completed inside it.
pub fn detect_stuck(trail: &[TrailSample], window: u64, min_displacement: f64) -> bool {
    let Some(last) = trail.last() else { return false };
    if window == 0 || last.tick < window {
        return false;
    }
    let from = last.tick - window;
    let Some(start) = trail.iter().rev().find(|s| s.tick <= from) else {
        return false;
    };
    last.position.dist(start.position) < min_displacement && last.subtasks_completed == start.subtasks_completed
}

/// Navigation evaluate: within range of the goal and facing its yaw.
pub fn judge_navigation(pose: &Pose2D, goal: Vec2, goal_yaw: f64, cfg: &TaskConfig) -> bool {
    pose.position().dist(goal) <= cfg.goal_range && angle_diff(goal_yaw, pose.yaw).abs() <= cfg.yaw_tolerance_deg.to_radians() + 1e-12
}

/// Search evaluate: the other robot shows up in the viewer's raster.
pub fn judge_search(world: &World, viewer: u64, other: u64, cfg: &TaskConfig) -> bool {
    world.sees(viewer, other, cfg.see_range)
}

/// Collision and red-light counts for one agent from the raw event log,
/// as (static, dynamic, red light).
pub fn count_events(world: &World, agent: u64, after_tick: u64) -> (u64, u64, u64) {
    let events: Vec<_> = world.log.events.iter().filter(|e| e.tick > after_tick).cloned().collect();
    count_events_in(&events, agent)
}

fn count_events_in(events: &[crate::env::Event], agent: u64) -> (u64, u64, u64) {
    use crate::env::EventKind;
    let mut c = (0, 0, 0);
    for e in events.iter().filter(|e| e.agent_id == agent) {
        match e.kind {
            EventKind::CollisionStatic => c.0 += 1,
            EventKind::CollisionDynamic => c.1 += 1,
            EventKind::RedLightViolation => c.2 += 1,
            _ => {}
        }
    }
    c
}

/// Drives an agent through a navigation task with the rule-based planner:
/// walk to the goal, turn to the goal yaw, evaluate. Subtasks, when present,
/// complete in order once the agent stands within range of each goal facing
/// its yaw.
pub fn run_nav_episode(world: &mut World, agent: u64, task: &NavTask, cfg: &TaskConfig) -> Result<EpisodeRecord, TaskError> {
    let fine = &world.waypoints.fine;
    // Physical tasks name coarse nodes; walk to the free fine waypoint beside it.
    let goal_wp = if task.subtasks.is_none() && world.waypoints.coarse.contains(task.goal) {
        let p = world.waypoints.coarse.position(task.goal);
        fine.nearest_where(p, |w| w.kind == WaypointKind::FineSidewalk && !world.static_blocked.contains(&w.id))
            .ok_or_else(|| TaskError::NoPath("no free waypoint near the goal".into()))?
    } else {
        task.goal
    };
    let goal = fine.position(goal_wp);
    let start_tick = world.tick;
    let pos0 = world.agent(agent).map_err(|_| TaskError::UnknownEntity(agent))?.pose.position();
    let d0 = pos0.manhattan(goal);
    let fine_waypoints = match world.nearest_waypoint(agent) {
        Some(s) => planner::nav_path(fine, &world.static_blocked, &BTreeSet::new(), s, goal_wp).map_or(0, |p| p.len() as u64),
        None => 0,
    };
    let mut prog = nav_program(world, agent, goal_wp)?;
    let subtasks = task.subtasks.clone().unwrap_or_default();
    let mut done_subtasks = 0usize;
    let mut trail = Vec::new();
    let (mut cs, mut cd, mut red, mut decisions) = (0u64, 0u64, 0u64, 0u64);
    let mut seen_events = world.log.events.len();
    let mut phase = 0u8; // 0 walking, 1 turned, 2 evaluated
    let mut outcome: Option<(bool, bool)> = None;
    let tol = cfg.yaw_tolerance_deg.to_radians();
    for _ in 0..task.time_limit {
        let a = world.agents[&agent].clone();
        let cmd = match phase {
            0 => next_primitive(&mut prog, world),
            _ => None,
        };
        let cmd = match (cmd, phase) {
            (Some(c), _) => c,
            // Walking ended, done or failed: face the goal yaw, then evaluate.
            (None, 0) => {
                phase = 1;
                ActionCommand::new(agent, Verb::Rotate { theta: angle_diff(task.goal_yaw, a.pose.yaw) })
            }
            _ => {
                phase = 2;
                ActionCommand::new(agent, Verb::Evaluate)
            }
        };
        decisions += 1;
        let cmds = world.fill_idle(&[cmd]);
        world.step_sync(&cmds).map_err(|e| TaskError::NoPath(e.to_string()))?;
        let (s_, d_, r_) = count_events_in(&world.log.events[seen_events..], agent);
        seen_events = world.log.events.len();
        cs += s_;
        cd += d_;
        red += r_;
        let a = &world.agents[&agent];
        while done_subtasks < subtasks.len().saturating_sub(1) {
            let s = &subtasks[done_subtasks];
            let p = world.waypoints.fine.position(s.goal);
            let facing = angle_diff(s.goal_yaw, a.pose.yaw).abs() <= tol + 1e-12;
            let needs_yaw = matches!(s.kind, SubTaskKind::OrientationAlignment | SubTaskKind::TurningAtIntersection);
            if a.pose.position().dist(p) <= cfg.goal_range && (facing || !needs_yaw) {
                done_subtasks += 1;
            } else {
                break;
            }
        }
        trail.push(TrailSample { tick: world.tick, position: a.pose.position(), subtasks_completed: done_subtasks });
        if phase == 2 {
            let ok = judge_navigation(&a.pose, goal, task.goal_yaw, cfg);
            if ok && !subtasks.is_empty() {
                done_subtasks = subtasks.len();
            }
            outcome = Some((ok, false));
            break;
        }
        if detect_stuck(&trail, cfg.stuck_window, cfg.stuck_displacement) {
            outcome = Some((false, true));
            break;
        }
    }
    let (success, stuck) = outcome.unwrap_or((false, false));
    let end = world.agents[&agent].pose.position();
    Ok(EpisodeRecord {
        task_id: task.id,
        success,
        subtasks_total: subtasks.len(),
        subtasks_completed: done_subtasks,
        d0,
        d_t: end.manhattan(goal),
        inter_d0: None,
        inter_d_t: None,
        collisions_static: cs,
        collisions_dynamic: cd,
        red_light: red,
        decisions,
        fine_waypoints,
        stuck,
        ticks_used: world.tick - start_tick,
    })
}

fn nav_program(world: &World, agent: u64, goal: WaypointId) -> Result<planner::PlanProgram, TaskError> {
    let nav = PlanStep {
        verb: "navigate".into(),
        args: Map::from_iter([("target".to_string(), serde_json::to_value(TargetSpec::Waypoint { waypoint: goal }).unwrap())]),
    };
    let plan = HighLevelPlan { steps: vec![nav], source_text: String::new() };
    planner::expand_rule_based(&plan, world, agent, &Vocabulary::default()).map_err(|e| TaskError::NoPath(e.to_string()))
}

fn next_primitive(prog: &mut planner::PlanProgram, world: &World) -> Option<ActionCommand> {
    loop {
        match planner::tick_executor(prog, world) {
            ExecStep::Primitive(c) => return Some(c),
            ExecStep::Hook { .. } => continue,
            ExecStep::Idle => return None,
        }
    }
}

/// Two robots walk toward a common meeting waypoint; the main robot
/// evaluates as soon as its view shows the other one. A wrong evaluate
/// ends the episode as failed.
pub fn run_search_episode(world: &mut World, main: u64, other: u64, time_limit: u64, cfg: &TaskConfig) -> Result<EpisodeRecord, TaskError> {
    let pa = world.agent(main).map_err(|_| TaskError::UnknownEntity(main))?.pose.position();
    let pb = world.agent(other).map_err(|_| TaskError::UnknownEntity(other))?.pose.position();
    let meet = world
        .waypoints
        .fine
        .nearest_where(pa.lerp(pb, 0.5), |w| w.kind.mode() == Mode::Pedestrian && !world.static_blocked.contains(&w.id))
        .ok_or_else(|| TaskError::NoPath("no meeting point".into()))?;
    let mut progs = [nav_program(world, main, meet)?, nav_program(world, other, meet)?];
    let fine_waypoints = progs[0].legs().next().map_or(0, |l| l.hops.len() as u64);
    let start_tick = world.tick;
    let mut seen_events = world.log.events.len();
    let (mut cs, mut cd, mut red, mut decisions) = (0, 0, 0, 0);
    let mut trail = Vec::new();
    let mut outcome = (false, false);
    for _ in 0..time_limit {
        let evaluate = judge_search(world, main, other, cfg);
        let a_cmd = if evaluate { Some(ActionCommand::new(main, Verb::Evaluate)) } else { next_primitive(&mut progs[0], world) };
        let b_cmd = next_primitive(&mut progs[1], world);
        decisions += a_cmd.is_some() as u64;
        let cmds = world.fill_idle(&a_cmd.into_iter().chain(b_cmd).collect::<Vec<_>>());
        world.step_sync(&cmds).map_err(|e| TaskError::NoPath(e.to_string()))?;
        let (s, d, r) = count_events_in(&world.log.events[seen_events..], main);
        seen_events = world.log.events.len();
        (cs, cd, red) = (cs + s, cd + d, red + r);
        if evaluate {
            outcome = (judge_search(world, main, other, cfg), false);
            break;
        }
        trail.push(TrailSample { tick: world.tick, position: world.agents[&main].pose.position(), subtasks_completed: 0 });
        if detect_stuck(&trail, cfg.stuck_window, cfg.stuck_displacement) {
            outcome = (false, true);
            break;
        }
    }
    let (ea, eb) = (world.agents[&main].pose.position(), world.agents[&other].pose.position());
    let goal = world.waypoints.fine.position(meet);
    Ok(EpisodeRecord {
        task_id: 0,
        success: outcome.0,
        subtasks_total: 0,
        subtasks_completed: 0,
        d0: pa.manhattan(goal),
        d_t: ea.manhattan(goal),
        inter_d0: Some(pa.manhattan(pb)),
        inter_d_t: Some(ea.manhattan(eb)),
        collisions_static: cs,
        collisions_dynamic: cd,
        red_light: red,
        decisions,
        fine_waypoints,
        stuck: outcome.1,
        ticks_used: world.tick - start_tick,
    })
}

/// What an externally driven episode is judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Judge {
    Navigation { goal: WaypointId, goal_yaw: f64 },
    Search { other: u64 },
}

/// Tick-by-tick judge for an agent driven from outside, e.g. over the wire.
/// The episode ends on the agent's first evaluate, when stuck, or at the
/// time limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMonitor {
    pub task_id: u64,
    pub agent: u64,
    pub judge: Judge,
    pub start_tick: u64,
    pub time_limit: u64,
    d0: f64,
    inter_d0: Option<f64>,
    fine_waypoints: u64,
    seen_events: usize,
    seen_evaluations: usize,
    counts: (u64, u64, u64),
    decisions: u64,
    trail: Vec<TrailSample>,
    pub record: Option<EpisodeRecord>,
}

impl EpisodeMonitor {
    pub fn new(world: &World, task_id: u64, agent: u64, judge: Judge, time_limit: u64) -> Result<Self, TaskError> {
        let pos = world.agent(agent).map_err(|_| TaskError::UnknownEntity(agent))?.pose.position();
        let (goal, inter_d0) = match &judge {
            Judge::Navigation { goal, .. } => {
                let p = world.waypoints.fine.get(*goal).ok_or_else(|| TaskError::NoPath(format!("unknown waypoint {goal}")))?.position;
                (p, None)
            }
            Judge::Search { other } => {
                let p = world.agent(*other).map_err(|_| TaskError::UnknownEntity(*other))?.pose.position();
                (p, Some(pos.manhattan(p)))
            }
        };
        let fine_waypoints = match (&judge, world.nearest_waypoint(agent)) {
            (Judge::Navigation { goal, .. }, Some(s)) => {
                planner::nav_path(&world.waypoints.fine, &world.static_blocked, &BTreeSet::new(), s, *goal).map_or(0, |p| p.len() as u64)
            }
            _ => 0,
        };
        Ok(Self {
            task_id,
            agent,
            judge,
            start_tick: world.tick,
            time_limit,
            d0: pos.manhattan(goal),
            inter_d0,
            fine_waypoints,
            seen_events: world.log.events.len(),
            seen_evaluations: world.evaluations.len(),
            counts: (0, 0, 0),
            decisions: 0,
            trail: Vec::new(),
            record: None,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.record.is_some()
    }

    /// Call once after every tick. Returns the record when the episode ends.
    pub fn observe(&mut self, world: &World, cfg: &TaskConfig) -> Option<&EpisodeRecord> {
        if self.record.is_some() {
            return self.record.as_ref();
        }
        let Some(a) = world.agents.get(&self.agent) else {
            self.finish(world, false, false);
            return self.record.as_ref();
        };
        let (s, d, r) = count_events_in(world.log.since(self.seen_events), self.agent);
        self.seen_events = world.log.events.len();
        self.counts = (self.counts.0 + s, self.counts.1 + d, self.counts.2 + r);
        if world.feedback.get(&self.agent).is_some_and(|f| f.verb != Verb::DoNothing.name()) {
            self.decisions += 1;
        }
        let evaluated = world.evaluations[self.seen_evaluations..].iter().any(|e| e.agent_id == self.agent);
        self.seen_evaluations = world.evaluations.len();
        if evaluated {
            let ok = match &self.judge {
                Judge::Navigation { goal, goal_yaw } => judge_navigation(&a.pose, world.waypoints.fine.position(*goal), *goal_yaw, cfg),
                Judge::Search { other } => judge_search(world, self.agent, *other, cfg),
            };
            self.finish(world, ok, false);
            return self.record.as_ref();
        }
        self.trail.push(TrailSample { tick: world.tick, position: a.pose.position(), subtasks_completed: 0 });
        if detect_stuck(&self.trail, cfg.stuck_window, cfg.stuck_displacement) {
            self.finish(world, false, true);
        } else if world.tick - self.start_tick >= self.time_limit {
            self.finish(world, false, false);
        }
        self.record.as_ref()
    }

    fn finish(&mut self, world: &World, success: bool, stuck: bool) {
        let pos = world.agents.get(&self.agent).map(|a| a.pose.position());
        let (d_t, inter_d_t) = match (&self.judge, pos) {
            (Judge::Navigation { goal, .. }, Some(p)) => (p.manhattan(world.waypoints.fine.position(*goal)), None),
            (Judge::Search { other }, Some(p)) => {
                let q = world.agents.get(other).map_or(p, |o| o.pose.position());
                (p.manhattan(q), Some(p.manhattan(q)))
            }
            (_, None) => (self.d0, self.inter_d0),
        };
        self.record = Some(EpisodeRecord {
            task_id: self.task_id,
            success,
            subtasks_total: 0,
            subtasks_completed: 0,
            d0: self.d0,
            d_t,
            inter_d0: self.inter_d0,
            inter_d_t,
            collisions_static: self.counts.0,
            collisions_dynamic: self.counts.1,
            red_light: self.counts.2,
            decisions: self.decisions,
            fine_waypoints: self.fine_waypoints,
            stuck,
            ticks_used: world.tick - self.start_tick,
        });
    }
}
