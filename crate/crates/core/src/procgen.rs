//! Three-stage procedural city generation: roads, then buildings, then
//! street elements, all merged into one [`SceneGraph`].
//!
//! Roads grow on a Manhattan lattice from a seed segment. A min-priority
//! queue keyed by `depth + U(0,1)` pops frontier road-ends, so growth is
//! breadth-biased but varied. Each pop extends straight and, with
//! `branch_probability` each, branches left and right. A new end that lands
//! within one segment length of an existing intersection snaps onto it
//! (road-end attachment); intersections never exceed degree 4.

use crate::geometry::{point_segment_distance, segments_intersect, Aabb, Pose2D, Vec2};
use crate::layout::{Axis, SegmentFrame, Side, StreetLayout};
use crate::rng::{self, SimRng};
use crate::world_model::{Category, EntityId, SceneEntity, SceneError, SceneGraph};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProcgenError {
    #[error("invalid generation config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("malformed map file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntersectionId(pub u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingType {
    pub name: String,
    pub frontage: f64,
    pub depth: f64,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropZone {
    /// Innermost sidewalk lane, next to buildings. Trees only.
    BuildingSide,
    /// Sidewalk lanes 1-3.
    Sidewalk,
    /// Parking strip between the vehicle lane and the curb.
    Curbside,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropType {
    pub name: String,
    pub category: Category,
    pub size: (f64, f64),
    pub zone: PropZone,
    #[serde(default)]
    pub tags: Vec<String>,
}

/// Asset catalog: the footprints generation may place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub buildings: Vec<BuildingType>,
    pub props: Vec<PropType>,
}

impl Default for Catalog {
    fn default() -> Self {
        let b = |name: &str, f: f64, d: f64, tags: &[&str]| BuildingType {
            name: name.into(),
            frontage: f,
            depth: d,
            tags: tags.iter().map(|s| s.to_string()).collect(),
        };
        let p = |name: &str, category, size, zone, tags: &[&str]| PropType {
            name: name.into(),
            category,
            size,
            zone,
            tags: tags.iter().map(|s| s.to_string()).collect(),
        };
        Catalog {
            buildings: vec![
                b("house", 10.0, 12.0, &["residential"]),
                b("shop", 12.0, 10.0, &["shop"]),
                b("restaurant", 14.0, 14.0, &["restaurant", "landmark"]),
                b("apartment", 16.0, 16.0, &["residential"]),
                b("office", 20.0, 18.0, &["office", "landmark"]),
                b("museum", 24.0, 20.0, &["museum", "landmark"]),
                b("hospital", 30.0, 24.0, &["hospital", "landmark"]),
            ],
            props: vec![
                p("tree", Category::Vegetation, (0.8, 0.8), PropZone::BuildingSide, &["tree"]),
                p("bench", Category::UrbanProp, (0.6, 0.6), PropZone::Sidewalk, &["bench"]),
                p("chair", Category::UrbanProp, (0.5, 0.5), PropZone::Sidewalk, &["chair"]),
                p("trash_bin", Category::UrbanProp, (0.5, 0.5), PropZone::Sidewalk, &["bin"]),
                p("cone", Category::UrbanProp, (0.4, 0.4), PropZone::Sidewalk, &["cone"]),
                p("parked_car", Category::Vehicle, (4.5, 1.8), PropZone::Curbside, &["car", "parked_vehicle"]),
            ],
        }
    }
}

impl Catalog {
    pub fn from_json(s: &str) -> Result<Self, ProcgenError> {
        let c: Catalog = serde_json::from_str(s).map_err(|e| ProcgenError::Malformed(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), ProcgenError> {
        if self.buildings.iter().any(|b| b.frontage <= 0.0 || b.depth <= 0.0) {
            return Err(ProcgenError::ConfigInvalid("building footprints must be positive".into()));
        }
        if self.props.iter().any(|p| p.size.0 <= 0.0 || p.size.1 <= 0.0) {
            return Err(ProcgenError::ConfigInvalid("prop footprints must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    /// Width and height in meters; the city covers `[0, w] x [0, h]`.
    pub city_extent: (f64, f64),
    /// Target road segments per square kilometer.
    pub road_density: f64,
    /// Target fraction of roadside frontage covered by buildings.
    pub building_density: f64,
    pub street_element_density: f64,
    pub max_road_depth: u32,
    pub branch_probability: f64,
    pub segment_length: f64,
    pub road_width: f64,
    pub sidewalk_width: f64,
    pub lane_count: u32,
    /// Place sidewalk obstacles for physical-reasoning tasks.
    pub obstacle_mode: bool,
    pub layout: StreetLayout,
    pub catalog: Catalog,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            city_extent: (520.0, 520.0),
            road_density: 200.0,
            building_density: 0.7,
            street_element_density: 0.5,
            max_road_depth: 12,
            branch_probability: 0.5,
            segment_length: 100.0,
            road_width: 12.0,
            sidewalk_width: 4.0,
            lane_count: 2,
            obstacle_mode: false,
            layout: StreetLayout::default(),
            catalog: Catalog::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ProcgenError> {
        let bad = |m: &str| Err(ProcgenError::ConfigInvalid(m.to_string()));
        let (w, h) = self.city_extent;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return bad("city extent must be positive");
        }
        if !(self.road_density > 0.0) {
            return bad("road_density must be positive");
        }
        if !(0.0..=1.0).contains(&self.building_density) {
            return bad("building_density must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.street_element_density) {
            return bad("street_element_density must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.branch_probability) {
            return bad("branch_probability must be in [0, 1]");
        }
        if self.max_road_depth == 0 {
            return bad("max_road_depth must be at least 1");
        }
        if !(self.road_width > 0.0 && self.sidewalk_width > 0.0 && self.lane_count >= 1) {
            return bad("road cross-section must be positive");
        }
        let corner = self.road_width / 2.0 + self.sidewalk_width;
        if !(self.segment_length > 2.0 * corner + self.layout.fine_step) {
            return bad("segment_length too short for junctions and one fine step");
        }
        if self.layout.lane_offsets.len() != 4 || !(self.layout.fine_step > 0.0) || self.layout.crosswalk_points < 2 {
            return bad("layout needs 4 lane offsets, a positive step and >= 2 crosswalk points");
        }
        if self.layout.lane_offsets.windows(2).any(|p| p[0] <= p[1])
            || self.layout.lane_offsets.iter().any(|o| *o <= self.road_width / 2.0 || *o >= corner)
        {
            return bad("lane offsets must decrease from building side to curb and lie on the sidewalk");
        }
        if self.catalog.buildings.is_empty() {
            return bad("catalog has no building types");
        }
        self.catalog.validate()
    }

    fn corner(&self) -> f64 {
        self.road_width / 2.0 + self.sidewalk_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: SegmentId,
    pub a: Vec2,
    pub b: Vec2,
    pub width: f64,
    pub lane_count: u32,
    pub sidewalk_width: f64,
}

impl RoadSegment {
    pub fn frame(&self) -> SegmentFrame {
        SegmentFrame::new(self.a, self.b, self.width, self.sidewalk_width)
    }

    pub fn axis(&self) -> Axis {
        Axis::of(self.b.sub(self.a))
    }

    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: IntersectionId,
    pub position: Vec2,
    pub segments: Vec<SegmentId>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub segments: Vec<RoadSegment>,
    pub intersections: Vec<Intersection>,
}

impl RoadNetwork {
    pub fn segment(&self, id: SegmentId) -> &RoadSegment {
        &self.segments[id.0 as usize]
    }

    pub fn intersection(&self, id: IntersectionId) -> &Intersection {
        &self.intersections[id.0 as usize]
    }

    pub fn intersection_at(&self, p: Vec2) -> Option<IntersectionId> {
        self.intersections.iter().find(|n| n.position.dist_sq(p) < 1e-6).map(|n| n.id)
    }

    /// Intersections at the `a` and `b` ends of a segment.
    pub fn endpoints(&self, id: SegmentId) -> (IntersectionId, IntersectionId) {
        let s = self.segment(id);
        (self.intersection_at(s.a).expect("segment end registered"), self.intersection_at(s.b).expect("segment end registered"))
    }

    pub fn degree(&self, id: IntersectionId) -> usize {
        self.intersection(id).segments.len()
    }

    /// Union-find over intersections joined by segments.
    pub fn is_connected(&self) -> bool {
        if self.intersections.is_empty() {
            return true;
        }
        let mut parent: Vec<usize> = (0..self.intersections.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for s in &self.segments {
            let (a, b) = self.endpoints(s.id);
            let (ra, rb) = (find(&mut parent, a.0 as usize), find(&mut parent, b.0 as usize));
            parent[ra] = rb;
        }
        let r0 = find(&mut parent, 0);
        (0..self.intersections.len()).all(|i| find(&mut parent, i) == r0)
    }

    /// Structural checks: ids dense, ends registered, degree <= 4 and no
    /// crossing away from shared intersections.
    pub fn validate(&self) -> Result<(), String> {
        for (i, s) in self.segments.iter().enumerate() {
            if s.id.0 as usize != i {
                return Err(format!("segment ids not dense at {i}"));
            }
            if s.a == s.b || s.width <= 0.0 {
                return Err(format!("degenerate segment {i}"));
            }
            if self.intersection_at(s.a).is_none() || self.intersection_at(s.b).is_none() {
                return Err(format!("segment {i} end not at an intersection"));
            }
        }
        for n in &self.intersections {
            if n.segments.len() > 4 {
                return Err(format!("intersection {} has degree {}", n.id.0, n.segments.len()));
            }
        }
        for (i, s) in self.segments.iter().enumerate() {
            for t in &self.segments[i + 1..] {
                let shared = [s.a, s.b].iter().any(|p| *p == t.a || *p == t.b);
                if segments_intersect(s.a, s.b, t.a, t.b) {
                    if !shared {
                        return Err(format!("segments {} and {} cross", s.id.0, t.id.0));
                    }
                    // Sharing an end is fine unless the two also overlap along a line.
                    let ends_on_other = [s.a, s.b].iter().filter(|p| point_segment_distance(**p, t.a, t.b) < 1e-9).count()
                        + [t.a, t.b].iter().filter(|p| point_segment_distance(**p, s.a, s.b) < 1e-9).count();
                    if ends_on_other > 2 {
                        return Err(format!("segments {} and {} overlap", s.id.0, t.id.0));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("road network serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frontier {
    priority: f64,
    seq: u64,
    node: usize,
    dir: (i32, i32),
    depth: u32,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for smallest priority first.
        other.priority.total_cmp(&self.priority).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn turn_left(d: (i32, i32)) -> (i32, i32) {
    (-d.1, d.0)
}

fn turn_right(d: (i32, i32)) -> (i32, i32) {
    (d.1, -d.0)
}

struct RoadBuilder<'a> {
    cfg: &'a GenConfig,
    nodes: Vec<Vec2>,
    edges: Vec<(usize, usize)>,
    edge_set: BTreeSet<(usize, usize)>,
}

impl RoadBuilder<'_> {
    fn inside(&self, p: Vec2) -> bool {
        let m = self.cfg.corner();
        let (w, h) = self.cfg.city_extent;
        p.x >= m - 1e-9 && p.x <= w - m + 1e-9 && p.y >= m - 1e-9 && p.y <= h - m + 1e-9
    }

    fn degree(&self, n: usize) -> usize {
        self.edges.iter().filter(|(a, b)| *a == n || *b == n).count()
    }

    /// Existing node within one segment length of `q` that keeps the new road axis-aligned.
    fn snap_target(&self, from: usize, q: Vec2) -> Option<usize> {
        let p = self.nodes[from];
        self.nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| *i != from && n.dist(q) < self.cfg.segment_length - 1e-9)
            .filter(|(_, n)| (n.x - p.x).abs() < 1e-9 || (n.y - p.y).abs() < 1e-9)
            .min_by(|a, b| a.1.dist_sq(q).total_cmp(&b.1.dist_sq(q)).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
    }

    fn too_close(&self, p: Vec2, q: Vec2, skip_a: usize, skip_b: Option<usize>) -> bool {
        let clearance = 0.5 * self.cfg.road_width;
        self.edges.iter().any(|&(ea, eb)| {
            let shares = [ea, eb].iter().any(|e| *e == skip_a || Some(*e) == skip_b);
            let (u, v) = (self.nodes[ea], self.nodes[eb]);
            if shares {
                // Collinear overlap with an incident road.
                let ends_on = [p, q].iter().filter(|x| point_segment_distance(**x, u, v) < 1e-9).count()
                    + [u, v].iter().filter(|x| point_segment_distance(**x, p, q) < 1e-9).count();
                return ends_on > 2;
            }
            let d = if segments_intersect(p, q, u, v) {
                0.0
            } else {
                [point_segment_distance(p, u, v), point_segment_distance(q, u, v), point_segment_distance(u, p, q), point_segment_distance(v, p, q)]
                    .into_iter()
                    .fold(f64::INFINITY, f64::min)
            };
            d < clearance
        })
    }

    /// Tries to add a segment from `from` heading `dir`. Returns the new
    /// frontier node when a fresh intersection was created.
    fn try_extend(&mut self, from: usize, dir: (i32, i32)) -> Option<Option<usize>> {
        let p = self.nodes[from];
        let l = self.cfg.segment_length;
        let q = Vec2::new(p.x + dir.0 as f64 * l, p.y + dir.1 as f64 * l);
        if !self.inside(q) || self.degree(from) >= 4 {
            return None;
        }
        if let Some(t) = self.snap_target(from, q) {
            let key = (from.min(t), from.max(t));
            if self.edge_set.contains(&key) || self.degree(t) >= 4 || self.too_close(p, self.nodes[t], from, Some(t)) {
                return None;
            }
            self.edges.push(key);
            self.edge_set.insert(key);
            return Some(None);
        }
        if self.too_close(p, q, from, None) {
            return None;
        }
        self.nodes.push(q);
        let n = self.nodes.len() - 1;
        let key = (from.min(n), from.max(n));
        self.edges.push(key);
        self.edge_set.insert(key);
        Some(Some(n))
    }
}

/// Pushes one fresh segment from the earliest node that can still grow.
/// Counts as a branch, so it honours the depth cap and is off when
/// branching is disabled.
fn revive(b: &mut RoadBuilder, depth: &mut Vec<u32>, heap: &mut BinaryHeap<Frontier>, seq: &mut u64, rng: &mut SimRng) -> bool {
    if b.cfg.branch_probability <= 0.0 {
        return false;
    }
    for node in 0..b.nodes.len() {
        if depth[node] >= b.cfg.max_road_depth {
            continue;
        }
        let mut dirs = [(1, 0), (0, 1), (-1, 0), (0, -1)];
        dirs.shuffle(rng);
        for d in dirs {
            if let Some(grown) = b.try_extend(node, d) {
                if let Some(n) = grown {
                    let dn = depth[node] + 1;
                    depth.resize(b.nodes.len(), 0);
                    depth[n] = dn;
                    *seq += 1;
                    heap.push(Frontier { priority: dn as f64 + rng.random::<f64>(), seq: *seq, node: n, dir: d, depth: dn });
                }
                return true;
            }
        }
    }
    false
}

/// Grows the road network. Deterministic in `cfg`.
pub fn generate_roads(cfg: &GenConfig) -> Result<RoadNetwork, ProcgenError> {
    cfg.validate()?;
    let mut rng = rng::substream(cfg.seed, rng::streams::PROCGEN, 0);
    generate_roads_with(cfg, &mut rng)
}

fn generate_roads_with(cfg: &GenConfig, rng: &mut SimRng) -> Result<RoadNetwork, ProcgenError> {
    let (w, h) = cfg.city_extent;
    let m = cfg.corner();
    let l = cfg.segment_length;
    let nx = ((w - 2.0 * m) / l + 1e-9).floor();
    let ny = ((h - 2.0 * m) / l + 1e-9).floor();
    if nx < 0.0 || ny < 0.0 || (nx < 1.0 && ny < 1.0) {
        return Err(ProcgenError::ConfigInvalid("extent too small for a single road segment".into()));
    }
    let ox = m + ((w - 2.0 * m) - nx * l) / 2.0;
    let oy = m + ((h - 2.0 * m) - ny * l) / 2.0;
    let seed = Vec2::new(ox + (nx / 2.0).floor() * l, oy + (ny / 2.0).floor() * l);

    let area_km2 = w * h / 1e6;
    let target = ((cfg.road_density * area_km2).ceil() as usize).max(1);

    let mut b = RoadBuilder { cfg, nodes: vec![seed], edges: Vec::new(), edge_set: BTreeSet::new() };
    let dirs = [(1, 0), (0, 1), (-1, 0), (0, -1)];
    let open: Vec<(i32, i32)> = dirs.iter().copied().filter(|d| b.inside(Vec2::new(seed.x + d.0 as f64 * l, seed.y + d.1 as f64 * l))).collect();
    let first = *open.choose(rng).ok_or_else(|| ProcgenError::ConfigInvalid("no room for a seed segment".into()))?;
    let seed_end = b.try_extend(0, first).flatten().expect("seed segment fits");

    // Both ends of the seed segment sit at depth 1.
    let mut depth = vec![1u32; b.nodes.len()];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    heap.push(Frontier { priority: 1.0 + rng.random::<f64>(), seq, node: seed_end, dir: first, depth: 1 });
    loop {
        let Some(f) = heap.pop() else {
            // The frontier died early: restart from the oldest node with room.
            if b.edges.len() >= target || !revive(&mut b, &mut depth, &mut heap, &mut seq, rng) {
                break;
            }
            continue;
        };
        if b.edges.len() >= target {
            break;
        }
        if f.depth >= cfg.max_road_depth {
            continue;
        }
        let mut tries = vec![f.dir];
        if rng.random_bool(cfg.branch_probability) {
            tries.push(turn_left(f.dir));
        }
        if rng.random_bool(cfg.branch_probability) {
            tries.push(turn_right(f.dir));
        }
        for d in tries {
            if b.edges.len() >= target {
                break;
            }
            if let Some(Some(n)) = b.try_extend(f.node, d) {
                seq += 1;
                let dn = f.depth + 1;
                depth.resize(b.nodes.len(), 0);
                depth[n] = dn;
                heap.push(Frontier { priority: dn as f64 + rng.random::<f64>(), seq, node: n, dir: d, depth: dn });
            }
        }
    }

    let mut net = RoadNetwork {
        segments: Vec::with_capacity(b.edges.len()),
        intersections: b
            .nodes
            .iter()
            .enumerate()
            .map(|(i, p)| Intersection { id: IntersectionId(i as u32), position: *p, segments: Vec::new() })
            .collect(),
    };
    for (i, &(u, v)) in b.edges.iter().enumerate() {
        let (pu, pv) = (b.nodes[u], b.nodes[v]);
        let (a, bb, na, nb) = if (pu.x, pu.y) < (pv.x, pv.y) { (pu, pv, u, v) } else { (pv, pu, v, u) };
        let id = SegmentId(i as u32);
        net.segments.push(RoadSegment { id, a, b: bb, width: cfg.road_width, lane_count: cfg.lane_count, sidewalk_width: cfg.sidewalk_width });
        net.intersections[na].segments.push(id);
        net.intersections[nb].segments.push(id);
    }
    Ok(net)
}

/// Footprint of a road: carriageway, both sidewalks and both junction squares.
pub fn road_footprint(seg: &RoadSegment) -> Aabb {
    let f = seg.frame();
    let c = f.corner();
    let p0 = f.point(-c, -c);
    let p1 = f.point(f.length + c, c);
    Aabb::new(p0.x, p0.y, p1.x, p1.y)
}

/// Inserts one non-blocking road entity per segment.
pub fn merge_roads(net: &RoadNetwork, graph: &mut SceneGraph) -> Result<BTreeMap<SegmentId, EntityId>, ProcgenError> {
    let mut ids = BTreeMap::new();
    for s in &net.segments {
        let id = graph.next_id();
        let f = s.frame();
        let e = SceneEntity::new(id.0, Category::RoadSegment, Pose2D::at(s.a.lerp(s.b, 0.5), f.dir.angle()), road_footprint(s), false)
            .with_tags(["road".to_string(), format!("segment:{}", s.id.0)]);
        graph.insert(e)?;
        ids.insert(s.id, id);
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildingStats {
    pub placed: usize,
    pub greedy_placed: usize,
    pub frontage_total: f64,
    pub frontage_filled: f64,
    pub fill_fraction: f64,
    /// `building_density * 0.8`.
    pub fill_floor: f64,
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StreetElementStats {
    pub trees: usize,
    pub sidewalk_props: usize,
    pub curbside: usize,
    pub skipped_for_free_lane: usize,
}

fn building_footprint(f: &SegmentFrame, layout: &StreetLayout, side: Side, s_lo: f64, t: &BuildingType) -> Aabb {
    let t0 = side.sign() * f.frontage_line(layout);
    let t1 = side.sign() * (f.frontage_line(layout) + t.depth);
    let p0 = f.point(s_lo, t0);
    let p1 = f.point(s_lo + t.frontage, t1);
    Aabb::new(p0.x, p0.y, p1.x, p1.y)
}

fn try_place_building(
    graph: &mut SceneGraph,
    f: &SegmentFrame,
    layout: &StreetLayout,
    side: Side,
    s_lo: f64,
    t: &BuildingType,
) -> Result<bool, ProcgenError> {
    let fp = building_footprint(f, layout, side, s_lo, t);
    let free = graph.extent().contains(&fp) && !graph.collides(&fp, &BTreeSet::new()) && !graph.overlaps_category(&fp, Category::RoadSegment);
    if !free {
        return Ok(false);
    }
    let id = graph.next_id();
    // Buildings face the road.
    let yaw = f.normal.scale(-side.sign()).angle();
    let mut e = SceneEntity::new(id.0, Category::Building, Pose2D::at(fp.center(), yaw), fp, true);
    e.tags.insert(t.name.clone());
    e.tags.extend(t.tags.iter().cloned());
    graph.insert(e)?;
    Ok(true)
}

/// Samples buildings along both sides of every segment, then greedily fills
/// the remaining gaps nearest to intersections and road ends.
pub fn generate_buildings(net: &RoadNetwork, graph: &mut SceneGraph, cfg: &GenConfig, rng: &mut SimRng) -> Result<BuildingStats, ProcgenError> {
    let mut stats = BuildingStats { fill_floor: cfg.building_density * 0.8, ..Default::default() };
    let types = &cfg.catalog.buildings;
    let mut by_size: Vec<&BuildingType> = types.iter().collect();
    by_size.sort_by(|a, b| b.frontage.total_cmp(&a.frontage));
    let min_frontage = by_size.last().map_or(f64::INFINITY, |t| t.frontage);

    for seg in &net.segments {
        let f = seg.frame();
        let (s0, s1) = f.span();
        let usable = s1 - s0;
        for side in Side::BOTH {
            stats.frontage_total += usable;
            if cfg.building_density <= 0.0 {
                continue;
            }
            let mut occupied: Vec<(f64, f64)> = Vec::new();

            // Sampling: walk the frontage, drawing a type and a gap whose mean
            // keeps the expected fill at the density target.
            let mut cursor = s0;
            while cursor + min_frontage <= s1 + 1e-9 {
                let t = types.choose(rng).expect("non-empty catalog");
                let mean_gap = t.frontage * (1.0 - cfg.building_density) / cfg.building_density;
                let gap = if mean_gap > 0.0 { rng.random_range(0.0..2.0 * mean_gap) } else { 0.0 };
                let lo = cursor + gap;
                if lo + t.frontage > s1 + 1e-9 {
                    break;
                }
                if try_place_building(graph, &f, &cfg.layout, side, lo, t)? {
                    occupied.push((lo, lo + t.frontage));
                    stats.placed += 1;
                    cursor = lo + t.frontage;
                } else {
                    cursor = lo + 1.0;
                }
            }

            // Greedy fill of residual gaps, nearest road end first.
            let filled = |occ: &[(f64, f64)]| occ.iter().map(|(a, b)| b - a).sum::<f64>();
            if filled(&occupied) / usable < cfg.building_density {
                occupied.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut gaps = Vec::new();
                let mut prev = s0;
                for (lo, hi) in &occupied {
                    if *lo - prev >= min_frontage - 1e-9 {
                        gaps.push((prev, *lo));
                    }
                    prev = *hi;
                }
                if s1 - prev >= min_frontage - 1e-9 {
                    gaps.push((prev, s1));
                }
                gaps.sort_by(|a, b| {
                    let da = (a.0 - s0).min(s1 - a.1);
                    let db = (b.0 - s0).min(s1 - b.1);
                    da.total_cmp(&db).then(a.0.total_cmp(&b.0))
                });
                for (glo, ghi) in gaps {
                    let mut c = glo;
                    while ghi - c >= min_frontage - 1e-9 && filled(&occupied) / usable < cfg.building_density {
                        let mut placed = false;
                        for t in by_size.iter().filter(|t| t.frontage <= ghi - c + 1e-9) {
                            if try_place_building(graph, &f, &cfg.layout, side, c, t)? {
                                occupied.push((c, c + t.frontage));
                                stats.placed += 1;
                                stats.greedy_placed += 1;
                                c += t.frontage;
                                placed = true;
                                break;
                            }
                        }
                        if !placed {
                            c += 1.0;
                        }
                    }
                }
            }
            stats.frontage_filled += filled(&occupied);
        }
    }
    stats.fill_fraction = if stats.frontage_total > 0.0 { stats.frontage_filled / stats.frontage_total } else { 0.0 };
    stats.shortfall = stats.fill_fraction + 1e-12 < stats.fill_floor;
    if stats.shortfall {
        log::warn!("building fill {:.3} below floor {:.3}", stats.fill_fraction, stats.fill_floor);
    }
    Ok(stats)
}

/// Per-group placement rates `(tree, sidewalk prop, curbside)` before scaling by density.
fn element_rates(obstacle_mode: bool) -> (f64, f64, f64) {
    if obstacle_mode {
        (0.5, 0.35, 0.2)
    } else {
        (0.3, 0.04, 0.15)
    }
}

/// Lane positions of every lateral group, bucketed on a coarse grid.
struct LaneGroups {
    points: Vec<[Vec2; 4]>,
    grid: BTreeMap<(i64, i64), Vec<usize>>,
}

impl LaneGroups {
    const CELL: f64 = 4.0;

    fn new(net: &RoadNetwork, layout: &StreetLayout) -> Self {
        let mut out = Self { points: Vec::new(), grid: BTreeMap::new() };
        for seg in &net.segments {
            let f = seg.frame();
            for side in Side::BOTH {
                for i in 0..f.fine_count(layout.fine_step) {
                    let pts: [Vec2; 4] = std::array::from_fn(|lane| f.sidewalk_point(layout, side, lane, i));
                    for p in &pts {
                        let key = ((p.x / Self::CELL).floor() as i64, (p.y / Self::CELL).floor() as i64);
                        let cell = out.grid.entry(key).or_default();
                        if cell.last() != Some(&out.points.len()) {
                            cell.push(out.points.len());
                        }
                    }
                    out.points.push(pts);
                }
            }
        }
        out
    }

    /// True when adding a blocking `fp` would leave some group it touches
    /// with every lane within `clearance` of a blocking entity.
    fn closes_a_group(&self, graph: &SceneGraph, fp: &Aabb, clearance: f64) -> bool {
        let r = fp.expanded(clearance);
        let cell = |v: f64| (v / Self::CELL).floor() as i64;
        let mut seen = BTreeSet::new();
        for cx in cell(r.min_x)..=cell(r.max_x) {
            for cy in cell(r.min_y)..=cell(r.max_y) {
                seen.extend(self.grid.get(&(cx, cy)).into_iter().flatten().copied());
            }
        }
        let none = BTreeSet::new();
        seen.into_iter().any(|g| {
            let probes = self.points[g].map(|p| Aabb::from_center(p, clearance, clearance));
            probes.iter().any(|p| p.overlaps(fp)) && probes.iter().all(|p| p.overlaps(fp) || graph.collides(p, &none))
        })
    }
}

/// Blocking radius used for the free-lane guarantee: the same clearance the
/// world uses when it marks waypoints as statically blocked.
pub fn free_lane_clearance() -> f64 {
    crate::env::EnvConfig::default().humanoid_size / 2.0
}

enum Placed {
    Yes,
    Rejected,
    WouldCloseGroup,
}

/// Places trees, sidewalk furniture and parked vehicles on fine sidewalk
/// positions. Elements may overlap each other but never buildings, and no
/// element may leave a lateral group of four lane positions without a free
/// lane, counting elements placed for neighbouring segments at corners.
pub fn generate_street_elements(
    net: &RoadNetwork,
    graph: &mut SceneGraph,
    cfg: &GenConfig,
    rng: &mut SimRng,
) -> Result<StreetElementStats, ProcgenError> {
    let mut stats = StreetElementStats::default();
    if cfg.street_element_density <= 0.0 {
        return Ok(stats);
    }
    let (tree_rate, prop_rate, curb_rate) = element_rates(cfg.obstacle_mode);
    let d = cfg.street_element_density;
    let pick = |zone: PropZone| -> Vec<&PropType> { cfg.catalog.props.iter().filter(|p| p.zone == zone).collect() };
    let trees = pick(PropZone::BuildingSide);
    let furniture = pick(PropZone::Sidewalk);
    let curbside = pick(PropZone::Curbside);
    let layout = &cfg.layout;
    let groups = LaneGroups::new(net, layout);
    let clearance = free_lane_clearance();

    let place = |graph: &mut SceneGraph, t: &PropType, at: Vec2, yaw: f64| -> Result<Placed, ProcgenError> {
        let pose = Pose2D::at(at, yaw);
        let fp = Aabb::oriented(&pose, t.size.0, t.size.1);
        if !graph.extent().contains(&fp) || graph.overlaps_category(&fp, Category::Building) {
            return Ok(Placed::Rejected);
        }
        if groups.closes_a_group(graph, &fp, clearance) {
            return Ok(Placed::WouldCloseGroup);
        }
        let id = graph.next_id();
        let mut e = SceneEntity::new(id.0, t.category, pose, fp, true);
        e.tags.insert(t.name.clone());
        e.tags.extend(t.tags.iter().cloned());
        e.tags.insert("street_element".into());
        graph.insert(e)?;
        Ok(Placed::Yes)
    };

    for seg in &net.segments {
        let f = seg.frame();
        let n = f.fine_count(layout.fine_step);
        let yaw = f.dir.angle();
        for side in Side::BOTH {
            for i in 0..n {
                let mut candidates: Vec<(&PropType, Vec2, usize)> = Vec::new();
                if !trees.is_empty() && rng.random_bool(d * tree_rate) {
                    candidates.push((*trees.choose(rng).unwrap(), f.sidewalk_point(layout, side, 0, i), 0));
                }
                for lane in 1..4 {
                    if !furniture.is_empty() && rng.random_bool(d * prop_rate) {
                        candidates.push((*furniture.choose(rng).unwrap(), f.sidewalk_point(layout, side, lane, i), 1));
                    }
                }
                if i % 2 == 1 && !curbside.is_empty() && rng.random_bool(d * curb_rate) {
                    let at = f.point(f.fine_s(layout.fine_step, i), side.sign() * f.parking_offset());
                    candidates.push((*curbside.choose(rng).unwrap(), at, 2));
                }
                for (t, at, kind) in candidates {
                    match place(graph, t, at, yaw)? {
                        Placed::Yes => match kind {
                            0 => stats.trees += 1,
                            1 => stats.sidewalk_props += 1,
                            _ => stats.curbside += 1,
                        },
                        Placed::WouldCloseGroup => stats.skipped_for_free_lane += 1,
                        Placed::Rejected => {}
                    }
                }
            }
        }
    }
    Ok(stats)
}

/// Which of the four lane positions of a lateral group have no blocking
/// entity within [`free_lane_clearance`].
pub fn lane_group_free(graph: &SceneGraph, seg: &RoadSegment, layout: &StreetLayout, side: Side, i: usize) -> [bool; 4] {
    let f = seg.frame();
    let c = free_lane_clearance();
    std::array::from_fn(|lane| !graph.collides(&Aabb::from_center(f.sidewalk_point(layout, side, lane, i), c, c), &BTreeSet::new()))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenReport {
    pub segments: usize,
    pub intersections: usize,
    pub buildings: BuildingStats,
    pub street_elements: StreetElementStats,
}

/// A generated (or loaded) city: configuration, static scene and road network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CityMap {
    pub config: GenConfig,
    pub scene: SceneGraph,
    pub roads: RoadNetwork,
}

impl CityMap {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("map serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ProcgenError> {
        serde_json::from_str(s).map_err(|e| ProcgenError::Malformed(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ProcgenError> {
        let s = std::fs::read_to_string(path).map_err(|e| ProcgenError::Malformed(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }
}

/// Runs roads, buildings and street elements in order from one seeded stream.
pub fn generate_city(cfg: &GenConfig) -> Result<(CityMap, GenReport), ProcgenError> {
    cfg.validate()?;
    let mut rng = rng::substream(cfg.seed, rng::streams::PROCGEN, 0);
    let roads = generate_roads_with(cfg, &mut rng)?;
    let (w, h) = cfg.city_extent;
    let mut scene = SceneGraph::new(Aabb::new(0.0, 0.0, w, h));
    merge_roads(&roads, &mut scene)?;
    let buildings = generate_buildings(&roads, &mut scene, cfg, &mut rng)?;
    let street_elements = generate_street_elements(&roads, &mut scene, cfg, &mut rng)?;
    let report = GenReport { segments: roads.segments.len(), intersections: roads.intersections.len(), buildings, street_elements };
    Ok((CityMap { config: cfg.clone(), scene, roads }, report))
}
