//! Benchmark fixtures; the benchmarks live in `benches/`.

use urbanworld::env::{AgentSpawn, Embodiment, ScenarioConfig, TrafficSpawn, World};
use urbanworld::procgen::{generate_city, CityMap, GenConfig};
use urbanworld::waypoints::WaypointKind;

/// A city of the default configuration at `size` meters square.
pub fn city(seed: u64, size: f64) -> CityMap {
    let cfg = GenConfig { seed, city_extent: (size, size), ..Default::default() };
    generate_city(&cfg).expect("benchmark city generates").0
}

/// `agents` humanoids spread over free sidewalk waypoints, plus traffic.
pub fn world(map: &CityMap, agents: usize, vehicles: usize, pedestrians: usize) -> World {
    let (probe, _) = World::reset(map, &ScenarioConfig::default()).expect("probe world");
    let free: Vec<_> = probe
        .waypoints
        .fine
        .nodes()
        .iter()
        .filter(|w| w.kind == WaypointKind::FineSidewalk && w.lane_index == Some(1) && !probe.static_blocked.contains(&w.id))
        .map(|w| w.id)
        .collect();
    let stride = free.len() / agents.max(1);
    let scenario = ScenarioConfig {
        agents: (0..agents)
            .map(|i| AgentSpawn { embodiment: Embodiment::Humanoid, spawn_waypoint: free[i * stride], yaw: None, vitals: None })
            .collect(),
        traffic: TrafficSpawn { n_vehicles: vehicles, n_pedestrians: pedestrians },
        ..Default::default()
    };
    World::reset(map, &scenario).expect("benchmark world").0
}
