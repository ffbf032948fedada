//! Fixed-timestep background traffic: vehicles, pedestrians and signals,
//! updated in that order every tick, each manager in ascending id order.
//!
//! Vehicles follow directed lane waypoints and track a target speed with a
//! PID controller. Pedestrians walk the fine sidewalk graph, turning toward
//! the next waypoint at a bounded rate. Signals run fixed-time cycles on
//! integer-millisecond clocks.

use crate::geometry::{angle_diff, point_segment_distance, Aabb, Pose2D, Vec2};
use crate::layout::Axis;
use crate::procgen::{IntersectionId, RoadNetwork, SegmentId};
use crate::rng::{self, SimRng};
use crate::waypoints::{astar_with, edge_cost, Mode, SignalId, WaypointGraph, WaypointId, WaypointKind};
use crate::world_model::SceneGraph;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrafficError {
    #[error("not enough free spawn slots: requested {requested}, found {available}")]
    InsufficientSpace { requested: usize, available: usize },
    #[error("invalid traffic config: {0}")]
    ConfigInvalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral: f64,
    pub prev_error: Option<f64>,
    pub integral_clamp: f64,
}

impl PidState {
    pub fn new(kp: f64, ki: f64, kd: f64, integral_clamp: f64) -> Self {
        Self { kp, ki, kd, integral: 0.0, prev_error: None, integral_clamp }
    }

    /// Acceleration command clamped to `[a_min, a_max]`. The integral only
    /// accumulates while the output is not saturated in the error's direction.
    pub fn update(&mut self, error: f64, dt: f64, a_min: f64, a_max: f64) -> f64 {
        let deriv = self.prev_error.map_or(0.0, |p| (error - p) / dt);
        self.prev_error = Some(error);
        let trial = (self.integral + error * dt).clamp(-self.integral_clamp, self.integral_clamp);
        let raw = self.kp * error + self.ki * trial + self.kd * deriv;
        let saturated = (raw > a_max && error > 0.0) || (raw < a_min && error < 0.0);
        if !saturated {
            self.integral = trial;
        }
        (self.kp * error + self.ki * self.integral + self.kd * deriv).clamp(a_min, a_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Green,
    Yellow,
    Red,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalState {
    pub id: SignalId,
    pub intersection_id: IntersectionId,
    /// Phase shown to east-west traffic; north-south sees the complement.
    pub phase: Phase,
    pub phase_elapsed_ms: u64,
    /// (green, yellow, red) in milliseconds.
    pub timing_ms: (u64, u64, u64),
}

impl SignalState {
    pub fn new(intersection_id: IntersectionId, timing_s: (f64, f64, f64)) -> Self {
        let ms = |s: f64| (s * 1000.0).round() as u64;
        Self {
            id: SignalId::of(intersection_id),
            intersection_id,
            phase: Phase::Green,
            phase_elapsed_ms: 0,
            timing_ms: (ms(timing_s.0), ms(timing_s.1), ms(timing_s.2)),
        }
    }

    pub fn phase_elapsed(&self) -> f64 {
        self.phase_elapsed_ms as f64 / 1000.0
    }

    fn duration(&self, p: Phase) -> u64 {
        match p {
            Phase::Green => self.timing_ms.0,
            Phase::Yellow => self.timing_ms.1,
            Phase::Red => self.timing_ms.2,
        }
    }

    pub fn advance_ms(&mut self, dt_ms: u64) {
        self.phase_elapsed_ms += dt_ms;
        while self.phase_elapsed_ms >= self.duration(self.phase) {
            self.phase_elapsed_ms -= self.duration(self.phase);
            self.phase = match self.phase {
                Phase::Green => Phase::Yellow,
                Phase::Yellow => Phase::Red,
                Phase::Red => Phase::Green,
            };
        }
    }

    /// Phase for vehicles travelling along `axis`. North-south is green
    /// while east-west is red, turning yellow for the last yellow interval.
    pub fn phase_for(&self, axis: Axis) -> Phase {
        match axis {
            Axis::EastWest => self.phase,
            Axis::NorthSouth => match self.phase {
                Phase::Green | Phase::Yellow => Phase::Red,
                Phase::Red => {
                    if self.phase_elapsed_ms + self.timing_ms.1 >= self.timing_ms.2 {
                        Phase::Yellow
                    } else {
                        Phase::Green
                    }
                }
            },
        }
    }

    /// Pedestrians may cross a road of `road_axis` only while its vehicles face red.
    pub fn walk_allowed(&self, road_axis: Axis) -> bool {
        self.phase_for(road_axis) == Phase::Red
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficConfig {
    pub n_vehicles: usize,
    pub n_pedestrians: usize,
    pub cruise_speed: f64,
    pub v_max: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral_clamp: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub headway_s: f64,
    pub min_gap: f64,
    pub lookahead: f64,
    pub vehicle_size: (f64, f64),
    /// Vehicles hold this far short of a red stop line so the crosswalk stays clear.
    pub stop_hold: f64,
    pub pedestrian_speed: f64,
    pub pedestrian_size: f64,
    pub max_turn_rate: f64,
    pub signal_timing: (f64, f64, f64),
    /// Blocked ticks before a pedestrian replans.
    pub replan_after: u32,
    /// Replans before a pedestrian gives up on its goal.
    pub max_replans: u32,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            n_vehicles: 0,
            n_pedestrians: 0,
            cruise_speed: 10.0,
            v_max: 15.0,
            kp: 0.8,
            ki: 0.1,
            kd: 0.05,
            integral_clamp: 10.0,
            a_min: -4.0,
            a_max: 3.0,
            headway_s: 2.0,
            min_gap: 2.0,
            lookahead: 30.0,
            vehicle_size: (4.5, 1.8),
            stop_hold: 3.0,
            pedestrian_speed: 1.3,
            pedestrian_size: 0.5,
            max_turn_rate: std::f64::consts::FRAC_PI_2,
            signal_timing: (10.0, 3.0, 10.0),
            replan_after: 20,
            max_replans: 3,
        }
    }
}

impl TrafficConfig {
    pub fn validate(&self) -> Result<(), TrafficError> {
        let bad = |m: &str| Err(TrafficError::ConfigInvalid(m.into()));
        if !(self.cruise_speed > 0.0 && self.cruise_speed <= self.v_max) {
            return bad("need 0 < cruise_speed <= v_max");
        }
        if !(self.a_min < 0.0 && self.a_max > 0.0) {
            return bad("need a_min < 0 < a_max");
        }
        let (g, y, r) = self.signal_timing;
        if !(g > 0.0 && y > 0.0 && r >= y) {
            return bad("signal timing needs positive phases and red >= yellow");
        }
        if !(self.pedestrian_speed >= 0.0 && self.max_turn_rate > 0.0) {
            return bad("pedestrian speed and turn rate must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u64,
    pub pose: Pose2D,
    pub speed: f64,
    pub target_speed: f64,
    pub route: Vec<WaypointId>,
    /// Index of the waypoint currently driven toward.
    pub route_cursor: usize,
    pub pid: PidState,
    pub rng: SimRng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedestrianState {
    pub id: u64,
    pub pose: Pose2D,
    pub speed: f64,
    pub goal: WaypointId,
    pub max_turn_rate: f64,
    pub route: Vec<WaypointId>,
    pub route_cursor: usize,
    pub blocked_ticks: u32,
    pub replans: u32,
    pub rng: SimRng,
}

/// Static inputs traffic reads every tick.
#[derive(Clone, Copy)]
pub struct TrafficContext<'a> {
    pub net: &'a RoadNetwork,
    pub scene: &'a SceneGraph,
    pub graph: &'a WaypointGraph,
    /// Pedestrian waypoints covered by blocking scenery.
    pub static_blocked: &'a BTreeSet<WaypointId>,
}

/// A dynamic obstacle owned by someone else (an agent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub id: u64,
    pub footprint: Aabb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficState {
    pub seed: u64,
    pub tick: u64,
    pub config: TrafficConfig,
    pub vehicles: Vec<VehicleState>,
    pub pedestrians: Vec<PedestrianState>,
    pub signals: Vec<SignalState>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickReport {
    pub blocked_vehicles: Vec<u64>,
    pub blocked_pedestrians: Vec<u64>,
}

/// Pedestrian waypoints inside a blocking static entity grown by `clearance`.
pub fn blocked_waypoints(scene: &SceneGraph, graph: &WaypointGraph, clearance: f64) -> BTreeSet<WaypointId> {
    graph
        .nodes()
        .iter()
        .filter(|w| w.kind.mode() == Mode::Pedestrian)
        .filter(|w| {
            let probe = Aabb::from_center(w.position, clearance, clearance);
            scene.collides(&probe, &BTreeSet::new())
        })
        .map(|w| w.id)
        .collect()
}

/// Picks the outgoing segment at `node` for a vehicle arriving on
/// `incoming`: uniform over the other arms, U-turn only at a dead end.
pub fn choose_route_at_intersection(rng: &mut SimRng, net: &RoadNetwork, node: IntersectionId, incoming: SegmentId) -> SegmentId {
    let mut options: Vec<SegmentId> = net.intersection(node).segments.iter().copied().filter(|s| *s != incoming).collect();
    if options.is_empty() {
        return incoming;
    }
    options.sort();
    options[rng.random_range(0..options.len())]
}

impl TrafficState {
    pub fn new(seed: u64, config: TrafficConfig) -> Self {
        Self { seed, tick: 0, config, vehicles: Vec::new(), pedestrians: Vec::new(), signals: Vec::new() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("traffic state serializes")
    }

    pub fn signal(&self, id: SignalId) -> Option<&SignalState> {
        self.signals.iter().find(|s| s.id == id)
    }

    pub fn vehicle_footprint(&self, v: &VehicleState) -> Aabb {
        Aabb::oriented(&v.pose, self.config.vehicle_size.0, self.config.vehicle_size.1)
    }

    pub fn pedestrian_footprint(&self, p: &PedestrianState) -> Aabb {
        let h = self.config.pedestrian_size / 2.0;
        Aabb::from_center(p.pose.position(), h, h)
    }

    /// Every dynamic traffic footprint, vehicles first, ascending id.
    pub fn footprints(&self) -> Vec<Obstacle> {
        self.vehicles
            .iter()
            .map(|v| Obstacle { id: v.id, footprint: self.vehicle_footprint(v) })
            .chain(self.pedestrians.iter().map(|p| Obstacle { id: p.id, footprint: self.pedestrian_footprint(p) }))
            .collect()
    }

    /// True when a pedestrian may step onto crosswalk waypoint `w` now.
    pub fn crosswalk_walkable(&self, graph: &WaypointGraph, w: WaypointId) -> bool {
        match graph.crosswalk_of(w) {
            Some(cw) => match cw.signal.and_then(|s| self.signal(s)) {
                Some(sig) => sig.walk_allowed(cw.road_axis),
                None => true,
            },
            None => true,
        }
    }
}

/// Places signals at every intersection of degree >= 3, then vehicles on
/// lane waypoints and pedestrians on free sidewalk waypoints, avoiding
/// `reserved` footprints. Ids start at `first_id`.
pub fn spawn_population(state: &mut TrafficState, ctx: &TrafficContext, first_id: u64, reserved: &[Aabb]) -> Result<(), TrafficError> {
    state.config.validate()?;
    let cfg = state.config.clone();
    state.signals = ctx.net.intersections.iter().filter(|n| n.segments.len() >= 3).map(|n| SignalState::new(n.id, cfg.signal_timing)).collect();

    let mut rng = rng::substream(state.seed, rng::streams::TRAFFIC_SPAWN, 0);
    let g = ctx.graph;
    let mut taken: Vec<Aabb> = reserved.to_vec();
    let free = |fp: &Aabb, taken: &[Aabb]| {
        ctx.scene.extent().contains(fp) && !ctx.scene.collides(fp, &BTreeSet::new()) && !taken.iter().any(|t| t.overlaps(fp))
    };

    // Lane slots exclude the last two waypoints so no vehicle starts on a stop line.
    let mut slots: Vec<(SegmentId, bool, usize)> = Vec::new();
    for (&(seg, fwd), ids) in &g.lanes {
        for i in 0..ids.len().saturating_sub(2) {
            slots.push((seg, fwd, i));
        }
    }
    if cfg.n_vehicles > slots.len() {
        return Err(TrafficError::InsufficientSpace { requested: cfg.n_vehicles, available: slots.len() });
    }
    slots.shuffle(&mut rng);
    let mut next_id = first_id;
    for (seg, fwd, i) in slots {
        if state.vehicles.len() == cfg.n_vehicles {
            break;
        }
        let lane = &g.lanes[&(seg, fwd)];
        let p = g.position(lane[i]);
        let yaw = g.position(lane[i + 1]).sub(p).angle();
        let pose = Pose2D::at(p, yaw);
        let fp = Aabb::oriented(&pose, cfg.vehicle_size.0, cfg.vehicle_size.1);
        if !free(&fp, &taken) {
            continue;
        }
        taken.push(fp);
        let id = next_id;
        next_id += 1;
        state.vehicles.push(VehicleState {
            id,
            pose,
            speed: 0.0,
            target_speed: cfg.cruise_speed,
            route: lane[i..].to_vec(),
            route_cursor: 1,
            pid: PidState::new(cfg.kp, cfg.ki, cfg.kd, cfg.integral_clamp),
            rng: rng::substream(state.seed, rng::streams::VEHICLE_ROUTE, id),
        });
    }
    if state.vehicles.len() < cfg.n_vehicles {
        return Err(TrafficError::InsufficientSpace { requested: cfg.n_vehicles, available: state.vehicles.len() });
    }

    let sidewalk: Vec<WaypointId> = g
        .nodes()
        .iter()
        .filter(|w| w.kind == WaypointKind::FineSidewalk && w.segment_id.is_some() && !ctx.static_blocked.contains(&w.id))
        .map(|w| w.id)
        .collect();
    if cfg.n_pedestrians > sidewalk.len() {
        return Err(TrafficError::InsufficientSpace { requested: cfg.n_pedestrians, available: sidewalk.len() });
    }
    let mut order = sidewalk.clone();
    order.shuffle(&mut rng);
    for start in order {
        if state.pedestrians.len() == cfg.n_pedestrians {
            break;
        }
        let h = cfg.pedestrian_size / 2.0;
        let fp = Aabb::from_center(g.position(start), h, h);
        if !free(&fp, &taken) {
            continue;
        }
        taken.push(fp);
        let id = next_id;
        next_id += 1;
        let mut prng = rng::substream(state.seed, rng::streams::PEDESTRIAN_ROUTE, id);
        let yaw = prng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let mut ped = PedestrianState {
            id,
            pose: Pose2D::at(g.position(start), yaw),
            speed: cfg.pedestrian_speed,
            goal: start,
            max_turn_rate: cfg.max_turn_rate,
            route: vec![start],
            route_cursor: 0,
            blocked_ticks: 0,
            replans: 0,
            rng: prng,
        };
        new_pedestrian_goal(&mut ped, ctx, &sidewalk, start);
        state.pedestrians.push(ped);
    }
    if state.pedestrians.len() < cfg.n_pedestrians {
        return Err(TrafficError::InsufficientSpace { requested: cfg.n_pedestrians, available: state.pedestrians.len() });
    }
    Ok(())
}

fn pedestrian_route(ctx: &TrafficContext, from: WaypointId, to: WaypointId, penalized: &BTreeSet<WaypointId>) -> Option<Vec<WaypointId>> {
    astar_with(ctx.graph, from, to, Mode::Pedestrian, |_, v, len| {
        if ctx.static_blocked.contains(&v) && v != to {
            None
        } else if penalized.contains(&v) {
            Some(edge_cost(len) * 10)
        } else {
            Some(edge_cost(len))
        }
    })
    .ok()
}

fn new_pedestrian_goal(ped: &mut PedestrianState, ctx: &TrafficContext, candidates: &[WaypointId], from: WaypointId) {
    // A handful of draws; pedestrians whose goals are all unreachable stand still.
    for _ in 0..8 {
        let goal = candidates[ped.rng.random_range(0..candidates.len())];
        if goal == from {
            continue;
        }
        if let Some(route) = pedestrian_route(ctx, from, goal, &BTreeSet::new()) {
            ped.goal = goal;
            ped.route = route;
            ped.route_cursor = 1;
            ped.replans = 0;
            ped.blocked_ticks = 0;
            return;
        }
    }
    ped.goal = from;
    ped.route = vec![from];
    ped.route_cursor = 1;
}

fn overlaps_any(fp: &Aabb, own: u64, others: &[Obstacle]) -> bool {
    others.iter().any(|o| o.id != own && o.footprint.overlaps(fp))
}

/// Along-path distance to the nearest obstacle within `lateral` of the
/// polyline `pts`, limited to `range`.
fn nearest_on_path(pts: &[Vec2], own: u64, others: &[Obstacle], lateral: f64, range: f64) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for o in others.iter().filter(|o| o.id != own) {
        let c = o.footprint.center();
        let half = 0.5 * o.footprint.width().max(o.footprint.height());
        let mut acc = 0.0;
        for w in pts.windows(2) {
            let seg_len = w[0].dist(w[1]);
            if point_segment_distance(c, w[0], w[1]) <= lateral {
                let d = w[1].sub(w[0]);
                let t = if seg_len > 0.0 { (c.sub(w[0]).dot(d) / (seg_len * seg_len)).clamp(0.0, 1.0) } else { 0.0 };
                let along = acc + t * seg_len;
                if along > 0.0 && along <= range && best.is_none_or(|(b, _)| along < b) {
                    best = Some((along, half));
                }
                break;
            }
            acc += seg_len;
            if acc > range {
                break;
            }
        }
    }
    best
}

/// Extends a vehicle route through the next junction when it runs short.
fn extend_vehicle_route(v: &mut VehicleState, ctx: &TrafficContext) {
    let g = ctx.graph;
    while v.route.len() - v.route_cursor < 4 {
        let last = *v.route.last().unwrap();
        let Some(stop) = g.stop_lines.get(&last).copied() else {
            // Ended on a connector or mid-lane; the next lane start follows connectors.
            break;
        };
        let out = choose_route_at_intersection(&mut v.rng, ctx.net, stop.intersection, stop.segment);
        let seg = ctx.net.segment(out);
        let at_a = seg.a.dist_sq(ctx.net.intersection(stop.intersection).position) < 1e-9;
        let mids = &g.connectors[&(stop.intersection, stop.segment, out)];
        v.route.extend(mids.iter().copied());
        v.route.extend(g.lanes[&(out, at_a)].iter().copied());
    }
    // Keep the route bounded: drop waypoints well behind the cursor.
    if v.route_cursor > 64 {
        v.route.drain(..v.route_cursor - 1);
        v.route_cursor = 1;
    }
}

fn update_vehicle(state: &TrafficState, v: &mut VehicleState, ctx: &TrafficContext, others: &[Obstacle], dt: f64) -> bool {
    let cfg = &state.config;
    let g = ctx.graph;
    extend_vehicle_route(v, ctx);

    // Path ahead as a polyline from the current position.
    let here = v.pose.position();
    let mut pts = vec![here];
    let mut ahead = 0.0;
    let mut stop_at: Option<f64> = None;
    let mut prev = here;
    for &w in &v.route[v.route_cursor.min(v.route.len())..] {
        let p = g.position(w);
        ahead += prev.dist(p);
        pts.push(p);
        prev = p;
        if stop_at.is_none() {
            if let Some(stop) = g.stop_lines.get(&w) {
                if let Some(sig) = state.signal(SignalId::of(stop.intersection)) {
                    let hold = ahead - cfg.stop_hold;
                    let must_stop = match sig.phase_for(stop.axis) {
                        Phase::Green => false,
                        Phase::Red => hold >= 0.0,
                        // Stop on yellow only if it can be done comfortably.
                        Phase::Yellow => hold >= v.speed * v.speed / (2.0 * -cfg.a_min),
                    };
                    if must_stop {
                        stop_at = Some(hold);
                    }
                }
            }
        }
        if ahead > cfg.lookahead + cfg.stop_hold {
            break;
        }
    }

    let braking = v.speed * v.speed / (2.0 * 0.75 * -cfg.a_min) + cfg.min_gap;
    let mut target = cfg.cruise_speed;
    if stop_at.is_some_and(|h| h <= braking.max(cfg.min_gap)) {
        target = 0.0;
    }
    let lateral = 0.5 * cfg.vehicle_size.1 + 0.6;
    if let Some((along, half)) = nearest_on_path(&pts, v.id, others, lateral, cfg.lookahead) {
        let gap = along - 0.5 * cfg.vehicle_size.0 - half;
        if gap < cfg.headway_s * v.speed + cfg.min_gap {
            target = 0.0;
        }
    }
    v.target_speed = target;
    let a = v.pid.update(target - v.speed, dt, cfg.a_min, cfg.a_max);
    v.speed = (v.speed + a * dt).clamp(0.0, cfg.v_max);

    let mut travel = v.speed * dt;
    if let Some(h) = stop_at {
        travel = travel.min(h.max(0.0));
    }
    if travel <= 0.0 {
        return false;
    }
    let (old_pose, old_cursor) = (v.pose, v.route_cursor);
    let mut pos = here;
    let mut yaw = v.pose.yaw;
    while travel > 1e-12 && v.route_cursor < v.route.len() {
        let tgt = g.position(v.route[v.route_cursor]);
        let d = pos.dist(tgt);
        if d > 1e-12 {
            yaw = tgt.sub(pos).angle();
        }
        if travel >= d {
            pos = tgt;
            travel -= d;
            v.route_cursor += 1;
        } else {
            pos = pos.add(tgt.sub(pos).scale(travel / d));
            travel = 0.0;
        }
    }
    v.pose = Pose2D::at(pos, yaw);
    let fp = Aabb::oriented(&v.pose, cfg.vehicle_size.0, cfg.vehicle_size.1);
    let static_hit = !ctx.scene.extent().contains(&fp) || ctx.scene.collides(&fp, &BTreeSet::new());
    if static_hit || overlaps_any(&fp, v.id, others) {
        v.pose = old_pose;
        v.route_cursor = old_cursor;
        v.speed = 0.0;
        return true;
    }
    false
}

fn update_pedestrian(
    state: &TrafficState,
    p: &mut PedestrianState,
    ctx: &TrafficContext,
    others: &[Obstacle],
    candidates: &[WaypointId],
    dt: f64,
) -> bool {
    let g = ctx.graph;
    if p.route_cursor >= p.route.len() {
        let at = *p.route.last().unwrap();
        new_pedestrian_goal(p, ctx, candidates, at);
        if p.route_cursor >= p.route.len() {
            return false;
        }
    }
    let next = p.route[p.route_cursor];
    let here = p.pose.position();
    let tgt = g.position(next);

    let entering_crosswalk = g.node(next).kind == WaypointKind::FineCrosswalk
        && (p.route_cursor == 0 || g.node(p.route[p.route_cursor - 1]).kind != WaypointKind::FineCrosswalk);
    if entering_crosswalk && !state.crosswalk_walkable(g, next) {
        return false;
    }

    let desired = tgt.sub(here).angle();
    let err = angle_diff(desired, p.pose.yaw);
    let max_turn = p.max_turn_rate * dt;
    let turn = err.clamp(-max_turn, max_turn);
    let yaw = p.pose.yaw + turn;
    let remaining_err = angle_diff(desired, yaw);
    let dist = here.dist(tgt);
    let step = (p.speed * dt * remaining_err.cos().max(0.0)).min(dist);
    let heading = Vec2::from_angle(yaw);
    let new_pos = if step >= dist - 1e-12 { tgt } else { here.add(heading.scale(step)) };
    let new_pose = Pose2D::at(new_pos, yaw);

    let h = state.config.pedestrian_size / 2.0;
    let fp = Aabb::from_center(new_pos, h, h);
    let moved = step > 0.0;
    if moved && (ctx.scene.collides(&fp, &BTreeSet::new()) || overlaps_any(&fp, p.id, others)) {
        // Turn in place, but do not move.
        p.pose = Pose2D::at(here, yaw);
        p.blocked_ticks += 1;
        if p.blocked_ticks >= state.config.replan_after {
            p.blocked_ticks = 0;
            p.replans += 1;
            let from = p.route[p.route_cursor.saturating_sub(1)];
            if p.replans > state.config.max_replans {
                new_pedestrian_goal(p, ctx, candidates, from);
            } else if let Some(route) = pedestrian_route(ctx, from, p.goal, &BTreeSet::from([next])) {
                p.route = route;
                p.route_cursor = 1.min(p.route.len());
            }
        }
        return true;
    }
    p.pose = new_pose;
    if new_pos == tgt {
        p.route_cursor += 1;
        p.blocked_ticks = 0;
    }
    false
}

/// One traffic tick. `agents` are dynamic obstacles owned by the caller.
pub fn step_traffic(state: &mut TrafficState, ctx: &TrafficContext, agents: &[Obstacle], dt: f64) -> TickReport {
    let mut report = TickReport::default();
    let mut obstacles = state.footprints();
    obstacles.extend_from_slice(agents);

    let mut vehicles = std::mem::take(&mut state.vehicles);
    for (i, v) in vehicles.iter_mut().enumerate() {
        if update_vehicle(state, v, ctx, &obstacles, dt) {
            report.blocked_vehicles.push(v.id);
        }
        obstacles[i].footprint = state.vehicle_footprint(v);
    }
    state.vehicles = vehicles;

    let candidates: Vec<WaypointId> = if state.pedestrians.is_empty() {
        Vec::new()
    } else {
        ctx.graph
            .nodes()
            .iter()
            .filter(|w| w.kind == WaypointKind::FineSidewalk && w.segment_id.is_some() && !ctx.static_blocked.contains(&w.id))
            .map(|w| w.id)
            .collect()
    };
    let nv = state.vehicles.len();
    let mut peds = std::mem::take(&mut state.pedestrians);
    for (i, p) in peds.iter_mut().enumerate() {
        if update_pedestrian(state, p, ctx, &obstacles, &candidates, dt) {
            report.blocked_pedestrians.push(p.id);
        }
        obstacles[nv + i].footprint = state.pedestrian_footprint(p);
    }
    state.pedestrians = peds;

    let dt_ms = (dt * 1000.0).round() as u64;
    for s in &mut state.signals {
        s.advance_ms(dt_ms);
    }
    state.tick += 1;
    report
}
