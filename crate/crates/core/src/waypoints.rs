//! Coarse and fine waypoint graphs over a road network, plus A* routing.
//!
//! The coarse graph has one node per intersection and three per sidewalk
//! (start, midpoint, end). The fine graph carries four lanes of evenly spaced
//! sidewalk waypoints per side, a crosswalk across every arm of every
//! intersection, a ring of corner and filler nodes around each junction so
//! sidewalks on neighbouring arms connect, and directed vehicle lanes with
//! junction connectors.
//!
//! Path costs are integer millimeters (`ceil(len * 1000)`), which makes
//! optimal-cost comparisons exact.

use crate::geometry::{Aabb, Vec2};
use crate::layout::{Axis, SegmentFrame, Side, StreetLayout};
use crate::procgen::{IntersectionId, RoadNetwork, SegmentId};
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaypointError {
    #[error("invalid waypoint config: {0}")]
    ConfigInvalid(String),
    #[error("no path from {0} to {1}")]
    NoPath(WaypointId, WaypointId),
    #[error("unknown waypoint {0}")]
    UnknownNode(WaypointId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WaypointId(pub u32);

impl std::fmt::Display for WaypointId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Signals are one per signalized intersection and share its numeric id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SignalId(pub u32);

impl SignalId {
    pub fn of(n: IntersectionId) -> Self {
        SignalId(n.0)
    }

    pub fn intersection(self) -> IntersectionId {
        IntersectionId(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaypointKind {
    CoarseIntersection,
    CoarseSidewalk,
    FineSidewalk,
    FineCrosswalk,
    RoadLane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pedestrian,
    Vehicle,
}

impl WaypointKind {
    pub fn mode(self) -> Mode {
        match self {
            WaypointKind::RoadLane => Mode::Vehicle,
            _ => Mode::Pedestrian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub id: WaypointId,
    pub position: Vec2,
    pub kind: WaypointKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lane_index: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub segment_id: Option<SegmentId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub signal_id: Option<SignalId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intersection_id: Option<IntersectionId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub side: Option<Side>,
    /// Longitudinal index along the owning sidewalk or lane.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub index: Option<u32>,
}

impl Waypoint {
    fn bare(id: WaypointId, position: Vec2, kind: WaypointKind) -> Self {
        Self { id, position, kind, lane_index: None, segment_id: None, signal_id: None, intersection_id: None, side: None, index: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub to: WaypointId,
    pub length: f64,
}

/// A crosswalk across one arm of an intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct Crosswalk {
    pub intersection: IntersectionId,
    pub segment: SegmentId,
    pub signal: Option<SignalId>,
    /// Ordered from the arm's right side to its left side.
    pub nodes: Vec<WaypointId>,
    /// Painted area; entering it on red is a violation.
    pub area: Aabb,
    /// Travel axis of the road being crossed.
    pub road_axis: Axis,
}

/// Entry point of a junction for vehicles arriving on a lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopLine {
    pub intersection: IntersectionId,
    pub segment: SegmentId,
    pub axis: Axis,
}

#[derive(Debug, Clone, Default)]
pub struct WaypointGraph {
    base: u32,
    nodes: Vec<Waypoint>,
    adj: Vec<Vec<Edge>>,
    /// Coarse: (segment, side) -> [start, mid, end]. Fine: unused.
    pub coarse_sidewalks: BTreeMap<(SegmentId, Side), [WaypointId; 3]>,
    pub coarse_intersections: BTreeMap<IntersectionId, WaypointId>,
    /// Fine: (segment, side) -> lanes 0..4, each ordered from `a` to `b`.
    pub sidewalks: BTreeMap<(SegmentId, Side), Vec<Vec<WaypointId>>>,
    pub crosswalks: Vec<Crosswalk>,
    /// (segment, forward) -> lane waypoints in travel order. Forward runs `a` to `b`.
    pub lanes: BTreeMap<(SegmentId, bool), Vec<WaypointId>>,
    /// (intersection, from segment, to segment) -> intermediate connector waypoints.
    pub connectors: BTreeMap<(IntersectionId, SegmentId, SegmentId), Vec<WaypointId>>,
    /// Last waypoint of every lane that ends at a junction.
    pub stop_lines: BTreeMap<WaypointId, StopLine>,
    pub step: f64,
}

#[derive(Serialize)]
struct GraphExport<'a> {
    nodes: &'a [Waypoint],
    edges: Vec<(WaypointId, WaypointId, f64)>,
}

impl WaypointGraph {
    /// Empty graph whose ids start at `base`.
    pub fn with_base(base: u32) -> Self {
        Self { base, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// One past the largest id.
    pub fn id_end(&self) -> u32 {
        self.base + self.nodes.len() as u32
    }

    pub fn contains(&self, id: WaypointId) -> bool {
        id.0 >= self.base && id.0 < self.id_end()
    }

    pub fn node(&self, id: WaypointId) -> &Waypoint {
        &self.nodes[(id.0 - self.base) as usize]
    }

    pub fn get(&self, id: WaypointId) -> Option<&Waypoint> {
        self.contains(id).then(|| self.node(id))
    }

    pub fn nodes(&self) -> &[Waypoint] {
        &self.nodes
    }

    pub fn position(&self, id: WaypointId) -> Vec2 {
        self.node(id).position
    }

    pub fn neighbors(&self, id: WaypointId) -> &[Edge] {
        &self.adj[(id.0 - self.base) as usize]
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum()
    }

    /// Adds a bare node and returns its id.
    pub fn add_node(&mut self, position: Vec2, kind: WaypointKind) -> WaypointId {
        let id = WaypointId(self.id_end());
        self.nodes.push(Waypoint::bare(id, position, kind));
        self.adj.push(Vec::new());
        id
    }

    fn push(&mut self, w: Waypoint) -> WaypointId {
        let id = WaypointId(self.id_end());
        self.nodes.push(Waypoint { id, ..w });
        self.adj.push(Vec::new());
        id
    }

    pub fn add_directed(&mut self, from: WaypointId, to: WaypointId) {
        let length = self.position(from).dist(self.position(to));
        let list = &mut self.adj[(from.0 - self.base) as usize];
        if !list.iter().any(|e| e.to == to) {
            list.push(Edge { to, length });
            list.sort_by_key(|e| e.to);
        }
    }

    pub fn add_undirected(&mut self, a: WaypointId, b: WaypointId) {
        self.add_directed(a, b);
        self.add_directed(b, a);
    }

    fn chain(&mut self, ids: &[WaypointId], directed: bool) {
        for w in ids.windows(2) {
            if directed {
                self.add_directed(w[0], w[1]);
            } else {
                self.add_undirected(w[0], w[1]);
            }
        }
    }

    /// Closest node of a mode to `p` (smallest id on ties).
    pub fn nearest(&self, p: Vec2, mode: Mode) -> Option<WaypointId> {
        self.nearest_where(p, |w| w.kind.mode() == mode)
    }

    pub fn nearest_where(&self, p: Vec2, pred: impl Fn(&Waypoint) -> bool) -> Option<WaypointId> {
        let mut best: Option<(f64, WaypointId)> = None;
        for w in &self.nodes {
            if !pred(w) {
                continue;
            }
            let d = w.position.dist_sq(p);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, w.id));
            }
        }
        best.map(|b| b.1)
    }

    pub fn crosswalk_of(&self, id: WaypointId) -> Option<&Crosswalk> {
        let w = self.get(id)?;
        if w.kind != WaypointKind::FineCrosswalk {
            return None;
        }
        self.crosswalks.iter().find(|c| c.nodes.contains(&id))
    }

    /// Debug/protocol export: `{nodes, edges}` with each edge listed once per direction.
    pub fn to_json(&self) -> serde_json::Value {
        let mut edges = Vec::new();
        for (i, list) in self.adj.iter().enumerate() {
            for e in list {
                edges.push((WaypointId(self.base + i as u32), e.to, e.length));
            }
        }
        serde_json::to_value(GraphExport { nodes: &self.nodes, edges }).expect("graph serializes")
    }

    /// Every node reachable from the first node of `mode`, ignoring direction.
    pub fn is_connected(&self, mode: Mode) -> bool {
        let members: Vec<WaypointId> = self.nodes.iter().filter(|w| w.kind.mode() == mode).map(|w| w.id).collect();
        let Some(&start) = members.first() else {
            return true;
        };
        let mut undirected: BTreeMap<WaypointId, Vec<WaypointId>> = BTreeMap::new();
        for &u in &members {
            for e in self.neighbors(u) {
                undirected.entry(u).or_default().push(e.to);
                undirected.entry(e.to).or_default().push(u);
            }
        }
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for v in undirected.get(&u).into_iter().flatten() {
                if seen.insert(*v) {
                    stack.push(*v);
                }
            }
        }
        seen.len() == members.len()
    }
}

/// Integer edge cost in millimeters.
pub fn edge_cost(length: f64) -> u64 {
    (length * 1000.0).ceil() as u64
}

fn heuristic(a: Vec2, b: Vec2) -> u64 {
    // Shrunk by a hair so rounding in the distance never overshoots an edge cost.
    (a.dist(b) * 1000.0 * (1.0 - 1e-9)).floor() as u64
}

/// Builds the coarse graph: one node per intersection plus start, midpoint
/// and end on the sidewalk centerline of each side of each segment.
pub fn build_coarse(net: &RoadNetwork) -> WaypointGraph {
    let mut g = WaypointGraph::with_base(0);
    for n in &net.intersections {
        let mut w = Waypoint::bare(WaypointId(0), n.position, WaypointKind::CoarseIntersection);
        w.intersection_id = Some(n.id);
        let id = g.push(w);
        g.coarse_intersections.insert(n.id, id);
    }
    for seg in &net.segments {
        let f = seg.frame();
        let (s0, s1) = f.span();
        let (na, nb) = net.endpoints(seg.id);
        for side in Side::BOTH {
            let t = side.sign() * f.sidewalk_center();
            let mut ids = [WaypointId(0); 3];
            for (k, s) in [s0, 0.5 * f.length, s1].into_iter().enumerate() {
                let mut w = Waypoint::bare(WaypointId(0), f.point(s, t), WaypointKind::CoarseSidewalk);
                w.segment_id = Some(seg.id);
                w.side = Some(side);
                w.index = Some(k as u32);
                ids[k] = g.push(w);
            }
            g.chain(&ids, false);
            g.add_undirected(g.coarse_intersections[&na], ids[0]);
            g.add_undirected(g.coarse_intersections[&nb], ids[2]);
            g.coarse_sidewalks.insert((seg.id, side), ids);
        }
    }
    g
}

/// One arm of an intersection seen from the node.
struct Arm {
    seg: SegmentId,
    frame: SegmentFrame,
    /// True when the node is the segment's `a` end.
    at_a: bool,
    /// Unit vector from the node along the arm.
    out: Vec2,
}

impl Arm {
    /// Longitudinal coordinate (in the segment frame) at distance `d` from the node.
    fn s_at(&self, d: f64) -> f64 {
        if self.at_a {
            d
        } else {
            self.frame.length - d
        }
    }
}

fn unit_dirs() -> [Vec2; 4] {
    [Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0), Vec2::new(-1.0, 0.0), Vec2::new(0.0, -1.0)]
}

fn quadrant(v: Vec2) -> (i8, i8) {
    (if v.x >= 0.0 { 1 } else { -1 }, if v.y >= 0.0 { 1 } else { -1 })
}

/// Builds the fine graph. Ids continue after the coarse graph's ids.
pub fn build_fine(net: &RoadNetwork, coarse: &WaypointGraph, step: f64, layout: &StreetLayout) -> Result<WaypointGraph, WaypointError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(WaypointError::ConfigInvalid("step must be positive".into()));
    }
    if layout.lane_offsets.len() != 4 {
        return Err(WaypointError::ConfigInvalid("exactly 4 lateral offsets required".into()));
    }
    if layout.crosswalk_points < 2 {
        return Err(WaypointError::ConfigInvalid("crosswalks need at least 2 points".into()));
    }
    let offs = &layout.lane_offsets;
    let mut g = WaypointGraph::with_base(coarse.id_end());
    g.step = step;

    // Sidewalk lanes.
    for seg in &net.segments {
        let f = seg.frame();
        let n = f.fine_count(step);
        for side in Side::BOTH {
            let mut lanes = Vec::with_capacity(4);
            for (lane, off) in offs.iter().enumerate() {
                let mut ids = Vec::with_capacity(n);
                for i in 0..n {
                    let p = f.point(f.fine_s(step, i), side.sign() * off);
                    let mut w = Waypoint::bare(WaypointId(0), p, WaypointKind::FineSidewalk);
                    w.lane_index = Some(lane as u8);
                    w.segment_id = Some(seg.id);
                    w.side = Some(side);
                    w.index = Some(i as u32);
                    ids.push(g.push(w));
                }
                g.chain(&ids, false);
                lanes.push(ids);
            }
            for pair in lanes.windows(2) {
                for (&a, &b) in pair[0].iter().zip(&pair[1]) {
                    g.add_undirected(a, b);
                }
            }
            g.sidewalks.insert((seg.id, side), lanes);
        }
    }

    // Vehicle lanes, right-hand traffic.
    for seg in &net.segments {
        let f = seg.frame();
        let n = f.fine_count(step);
        let (na, nb) = net.endpoints(seg.id);
        for forward in [true, false] {
            let t = if forward { -f.vehicle_lane_offset() } else { f.vehicle_lane_offset() };
            let mut ids = Vec::with_capacity(n);
            for k in 0..n {
                let i = if forward { k } else { n - 1 - k };
                let mut w = Waypoint::bare(WaypointId(0), f.point(f.fine_s(step, i), t), WaypointKind::RoadLane);
                w.segment_id = Some(seg.id);
                w.index = Some(k as u32);
                ids.push(g.push(w));
            }
            g.chain(&ids, true);
            let end_node = if forward { nb } else { na };
            g.stop_lines.insert(*ids.last().unwrap(), StopLine { intersection: end_node, segment: seg.id, axis: seg.axis() });
            g.lanes.insert((seg.id, forward), ids);
        }
    }

    for node in &net.intersections {
        let c = node.position;
        let signal = (node.segments.len() >= 3).then(|| SignalId::of(node.id));
        let arms: Vec<Arm> = node
            .segments
            .iter()
            .map(|&sid| {
                let s = net.segment(sid);
                let frame = s.frame();
                let at_a = s.a.dist_sq(c) < 1e-9;
                let out = if at_a { frame.dir } else { frame.dir.scale(-1.0) };
                Arm { seg: sid, frame, at_a, out }
            })
            .collect();
        let arm_toward = |d: Vec2| arms.iter().find(|a| a.out.dot(d) > 0.5);

        // Junction ring per lane: four corners plus filler chains on sides without an arm.
        let mut corners: BTreeMap<(usize, (i8, i8)), WaypointId> = BTreeMap::new();
        for (lane, &o) in offs.iter().enumerate() {
            for q in [(1i8, 1i8), (-1, 1), (-1, -1), (1, -1)] {
                let p = c.add(Vec2::new(q.0 as f64 * o, q.1 as f64 * o));
                let mut w = Waypoint::bare(WaypointId(0), p, WaypointKind::FineSidewalk);
                w.lane_index = Some(lane as u8);
                w.intersection_id = Some(node.id);
                corners.insert((lane, q), g.push(w));
            }
        }
        let mut fillers: BTreeMap<(usize, usize), Vec<WaypointId>> = BTreeMap::new();
        for (di, d) in unit_dirs().into_iter().enumerate() {
            if arm_toward(d).is_some() {
                continue;
            }
            let perp = d.perp();
            for (lane, &o) in offs.iter().enumerate() {
                let c1 = c.add(d.scale(o)).add(perp.scale(o));
                let c2 = c.add(d.scale(o)).sub(perp.scale(o));
                let mut chain = vec![corners[&(lane, quadrant(c1.sub(c)))]];
                let mut mids = Vec::new();
                for k in 1..=3 {
                    let mut w = Waypoint::bare(WaypointId(0), c1.lerp(c2, k as f64 / 4.0), WaypointKind::FineSidewalk);
                    w.lane_index = Some(lane as u8);
                    w.intersection_id = Some(node.id);
                    w.index = Some(k);
                    let id = g.push(w);
                    chain.push(id);
                    mids.push(id);
                }
                chain.push(corners[&(lane, quadrant(c2.sub(c)))]);
                g.chain(&chain, false);
                fillers.insert((di, lane), mids);
            }
            for lane in 0..3 {
                for (&a, &b) in fillers[&(di, lane)].iter().zip(&fillers[&(di, lane + 1)]) {
                    g.add_undirected(a, b);
                }
            }
        }
        for q in [(1i8, 1i8), (-1, 1), (-1, -1), (1, -1)] {
            for lane in 0..3 {
                g.add_undirected(corners[&(lane, q)], corners[&(lane + 1, q)]);
            }
        }

        // Sidewalk ends attach to the ring corner on their quadrant.
        for arm in &arms {
            let n = arm.frame.fine_count(step);
            let idx = if arm.at_a { 0 } else { n - 1 };
            for side in Side::BOTH {
                let lanes = g.sidewalks[&(arm.seg, side)].clone();
                for (lane, ids) in lanes.iter().enumerate() {
                    let end = ids[idx];
                    let q = quadrant(g.position(end).sub(c));
                    g.add_undirected(end, corners[&(lane, q)]);
                }
            }
        }

        // Crosswalks across every arm.
        for arm in &arms {
            let f = &arm.frame;
            let d = f.corner() - layout.crosswalk_inset;
            let s = arm.s_at(d);
            let t_max = offs[3];
            let m = layout.crosswalk_points;
            let mut ids = Vec::with_capacity(m);
            for k in 0..m {
                let t = -t_max + 2.0 * t_max * k as f64 / (m - 1) as f64;
                let mut w = Waypoint::bare(WaypointId(0), f.point(s, t), WaypointKind::FineCrosswalk);
                w.segment_id = Some(arm.seg);
                w.signal_id = signal;
                w.intersection_id = Some(node.id);
                w.index = Some(k as u32);
                ids.push(g.push(w));
            }
            g.chain(&ids, false);
            let n = f.fine_count(step);
            let idx = if arm.at_a { 0 } else { n - 1 };
            for (end, side) in [(ids[0], Side::Right), (ids[m - 1], Side::Left)] {
                let curb = g.sidewalks[&(arm.seg, side)][3][idx];
                g.add_undirected(end, curb);
                let q = quadrant(g.position(end).sub(c));
                g.add_undirected(end, corners[&(3, q)]);
            }
            let half = 0.5 * layout.crosswalk_inset.max(1.0);
            let p0 = f.point(s - half, -f.road_half);
            let p1 = f.point(s + half, f.road_half);
            g.crosswalks.push(Crosswalk {
                intersection: node.id,
                segment: arm.seg,
                signal,
                nodes: ids,
                area: Aabb::new(p0.x, p0.y, p1.x, p1.y),
                road_axis: Axis::of(f.dir),
            });
        }

        // Vehicle connectors from every incoming lane end to every outgoing lane start.
        for from in &arms {
            let incoming = g.lanes[&(from.seg, !from.at_a)].clone();
            let last = *incoming.last().unwrap();
            for to in &arms {
                let outgoing = g.lanes[&(to.seg, to.at_a)].clone();
                let first = outgoing[0];
                let (p, q) = (g.position(last), g.position(first));
                let k = ((p.dist(q) / step).ceil() as usize).saturating_sub(1);
                let mut chain = vec![last];
                let mut mids = Vec::with_capacity(k);
                for j in 1..=k {
                    let mut w = Waypoint::bare(WaypointId(0), p.lerp(q, j as f64 / (k + 1) as f64), WaypointKind::RoadLane);
                    w.intersection_id = Some(node.id);
                    let id = g.push(w);
                    chain.push(id);
                    mids.push(id);
                }
                chain.push(first);
                g.chain(&chain, true);
                g.connectors.insert((node.id, from.seg, to.seg), mids);
            }
        }
    }
    Ok(g)
}

/// Shortest path under integer-millimeter Euclidean costs. Among equal-cost
/// paths the lexicographically smallest id sequence is returned.
pub fn astar(g: &WaypointGraph, from: WaypointId, to: WaypointId, mode: Mode) -> Result<Vec<WaypointId>, WaypointError> {
    astar_with(g, from, to, mode, |_, _, len| Some(edge_cost(len)))
}

/// A* with a caller-supplied cost per edge `(u, v, length)`. Returning
/// `None` removes the edge. Costs must be at least the plain edge cost for
/// the heuristic to stay admissible.
pub fn astar_with(
    g: &WaypointGraph,
    from: WaypointId,
    to: WaypointId,
    mode: Mode,
    cost: impl Fn(WaypointId, WaypointId, f64) -> Option<u64>,
) -> Result<Vec<WaypointId>, WaypointError> {
    for id in [from, to] {
        if !g.contains(id) {
            return Err(WaypointError::UnknownNode(id));
        }
    }
    if g.node(from).kind.mode() != mode || g.node(to).kind.mode() != mode {
        return Err(WaypointError::NoPath(from, to));
    }
    if from == to {
        return Ok(vec![from]);
    }
    let goal = g.position(to);
    let idx = |id: WaypointId| (id.0 - g.base) as usize;
    let n = g.len();
    let mut dist = vec![u64::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[idx(from)] = 0;
    heap.push(Reverse((heuristic(g.position(from), goal), 0u64, from)));
    let mut best: Option<u64> = None;
    while let Some(Reverse((f, gu, u))) = heap.pop() {
        if best.is_some_and(|b| f > b) {
            break;
        }
        if closed[idx(u)] || gu > dist[idx(u)] {
            continue;
        }
        closed[idx(u)] = true;
        if u == to {
            best = Some(gu);
            continue;
        }
        for e in g.neighbors(u) {
            if g.node(e.to).kind.mode() != mode {
                continue;
            }
            let Some(c) = cost(u, e.to, e.length) else { continue };
            let nd = gu + c;
            let vi = idx(e.to);
            if nd < dist[vi] {
                dist[vi] = nd;
                heap.push(Reverse((nd + heuristic(g.position(e.to), goal), nd, e.to)));
            }
        }
    }
    let Some(total) = best else {
        return Err(WaypointError::NoPath(from, to));
    };

    // Tight edges over settled nodes form a DAG of all optimal paths. Keep
    // the part that reaches the goal, then walk it taking the smallest id.
    let mut preds: BTreeMap<WaypointId, Vec<WaypointId>> = BTreeMap::new();
    for (i, &is_closed) in closed.iter().enumerate() {
        if !is_closed {
            continue;
        }
        let u = WaypointId(g.base + i as u32);
        for e in g.neighbors(u) {
            let vi = idx(e.to);
            if !closed[vi] || g.node(e.to).kind.mode() != mode {
                continue;
            }
            if let Some(c) = cost(u, e.to, e.length) {
                if dist[i] + c == dist[vi] && dist[vi] <= total {
                    preds.entry(e.to).or_default().push(u);
                }
            }
        }
    }
    let mut on_path = BTreeSet::from([to]);
    let mut stack = vec![to];
    while let Some(v) = stack.pop() {
        for &u in preds.get(&v).into_iter().flatten() {
            if on_path.insert(u) {
                stack.push(u);
            }
        }
    }
    let mut path = vec![from];
    let mut u = from;
    while u != to {
        let next = g
            .neighbors(u)
            .iter()
            .filter(|e| on_path.contains(&e.to) && preds.get(&e.to).is_some_and(|p| p.contains(&u)))
            .map(|e| e.to)
            .min()
            .expect("optimal DAG reaches the goal");
        path.push(next);
        u = next;
    }
    Ok(path)
}

/// Sum of plain integer edge costs along a path.
pub fn path_cost(g: &WaypointGraph, path: &[WaypointId]) -> Option<u64> {
    path.windows(2).map(|w| g.neighbors(w[0]).iter().find(|e| e.to == w[1]).map(|e| edge_cost(e.length))).sum()
}

pub fn path_length(g: &WaypointGraph, path: &[WaypointId]) -> f64 {
    path.windows(2).map(|w| g.position(w[0]).dist(g.position(w[1]))).sum()
}

/// Both graphs of a city.
#[derive(Debug, Clone)]
pub struct Waypoints {
    pub coarse: WaypointGraph,
    pub fine: WaypointGraph,
}

impl Waypoints {
    pub fn build(net: &RoadNetwork, layout: &StreetLayout) -> Result<Self, WaypointError> {
        let coarse = build_coarse(net);
        let fine = build_fine(net, &coarse, layout.fine_step, layout)?;
        Ok(Self { coarse, fine })
    }
}
