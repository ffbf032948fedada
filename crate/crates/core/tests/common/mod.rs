#![allow(dead_code)]

pub mod oracles;

use urbanworld::env::{AgentSpawn, Embodiment, ScenarioConfig, World};
use urbanworld::geometry::{Aabb, Pose2D, Vec2};
use urbanworld::procgen::{CityMap, GenConfig, RoadNetwork};
use urbanworld::waypoints::{WaypointGraph, WaypointId, WaypointKind, Waypoints};
use urbanworld::world_model::{Category, SceneEntity, SceneGraph};

pub const CHAIR: u64 = 500;

/// The planner's worked-example topology: waypoints at (0,0), (0,1),
/// (1,10), (10,10), plus longer detours via (0,10) and (10,0). A chair
/// stands at (10,10) and one humanoid starts at (0,0) facing east.
pub fn example_world() -> (World, u64) {
    let pts = [(0.0, 0.0), (0.0, 1.0), (1.0, 10.0), (10.0, 10.0), (0.0, 10.0), (10.0, 0.0)];
    let mut g = WaypointGraph::with_base(0);
    let ids: Vec<WaypointId> = pts.iter().map(|&(x, y)| g.add_node(Vec2::new(x, y), WaypointKind::FineSidewalk)).collect();
    for (a, b) in [(0, 1), (1, 2), (2, 3), (1, 4), (4, 2), (4, 3), (0, 5), (5, 3)] {
        g.add_undirected(ids[a], ids[b]);
    }
    let mut scene = SceneGraph::new(Aabb::new(-20.0, -20.0, 40.0, 40.0));
    let c = Vec2::new(10.0, 10.0);
    scene
        .insert(SceneEntity::new(CHAIR, Category::UrbanProp, Pose2D::at(c, 0.0), Aabb::from_center(c, 0.25, 0.25), true).with_tags(["chair"]))
        .unwrap();
    let map = CityMap { config: GenConfig::default(), scene, roads: RoadNetwork { segments: vec![], intersections: vec![] } };
    let wp = Waypoints { coarse: WaypointGraph::with_base(0), fine: g };
    let sc = ScenarioConfig {
        agents: vec![AgentSpawn { embodiment: Embodiment::Humanoid, spawn_waypoint: ids[0], yaw: Some(0.0), vitals: None }],
        ..Default::default()
    };
    let (w, _) = World::from_parts(&map, wp, &sc).unwrap();
    let id = *w.agents.keys().next().unwrap();
    (w, id)
}

/// Plain Dijkstra over integer edge costs, skipping `blocked` nodes other than the goal.
pub fn dijkstra(g: &WaypointGraph, from: WaypointId, to: WaypointId, allow: impl Fn(WaypointId) -> bool) -> Option<u64> {
    use std::cmp::Reverse;
    use std::collections::{BTreeMap, BinaryHeap};
    let mut dist: BTreeMap<WaypointId, u64> = BTreeMap::from([(from, 0)]);
    let mut heap = BinaryHeap::from([Reverse((0u64, from))]);
    while let Some(Reverse((d, u))) = heap.pop() {
        if u == to {
            return Some(d);
        }
        if dist.get(&u).is_some_and(|&b| d > b) {
            continue;
        }
        for e in g.neighbors(u) {
            if g.node(e.to).kind.mode() != g.node(from).kind.mode() || (e.to != to && !allow(e.to)) {
                continue;
            }
            let nd = d + urbanworld::waypoints::edge_cost(e.length);
            if dist.get(&e.to).is_none_or(|&b| nd < b) {
                dist.insert(e.to, nd);
                heap.push(Reverse((nd, e.to)));
            }
        }
    }
    None
}

/// A small generated city with restaurants and landmarks, built once per test binary.
pub fn small_city() -> &'static CityMap {
    static MAP: std::sync::OnceLock<CityMap> = std::sync::OnceLock::new();
    MAP.get_or_init(|| {
        let cfg = GenConfig { seed: 5, city_extent: (320.0, 320.0), ..Default::default() };
        urbanworld::procgen::generate_city(&cfg).expect("city generates").0
    })
}

/// A hand-built city: straight roads between `points` joined by `edges`,
/// plus landmark buildings given as (id, x0, y0, x1, y1, name).
pub fn hand_city(points: &[(f64, f64)], edges: &[(usize, usize)], buildings: &[(u64, f64, f64, f64, f64, &str)]) -> CityMap {
    use urbanworld::procgen::{Intersection, IntersectionId, RoadSegment, SegmentId};
    let cfg = GenConfig::default();
    let mut roads = RoadNetwork {
        segments: vec![],
        intersections: points
            .iter()
            .enumerate()
            .map(|(i, p)| Intersection { id: IntersectionId(i as u32), position: Vec2::new(p.0, p.1), segments: vec![] })
            .collect(),
    };
    for (k, &(u, v)) in edges.iter().enumerate() {
        let (pu, pv) = (roads.intersections[u].position, roads.intersections[v].position);
        let (a, b) = if (pu.x, pu.y) < (pv.x, pv.y) { (pu, pv) } else { (pv, pu) };
        let id = SegmentId(k as u32);
        roads.segments.push(RoadSegment { id, a, b, width: cfg.road_width, lane_count: cfg.lane_count, sidewalk_width: cfg.sidewalk_width });
        roads.intersections[u].segments.push(id);
        roads.intersections[v].segments.push(id);
    }
    let mut scene = SceneGraph::new(Aabb::new(0.0, 0.0, 400.0, 400.0));
    for &(id, x0, y0, x1, y1, name) in buildings {
        let fp = Aabb::new(x0, y0, x1, y1);
        scene.insert(SceneEntity::new(id, Category::Building, Pose2D::at(fp.center(), 0.0), fp, true).with_tags([name, "landmark"])).unwrap();
    }
    CityMap { config: cfg, scene, roads }
}
