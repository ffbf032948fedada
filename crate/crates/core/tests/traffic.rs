use urbanworld::procgen::{generate_city, GenConfig};
use urbanworld::traffic::{blocked_waypoints, spawn_population, step_traffic, TrafficConfig, TrafficContext, TrafficState};
use urbanworld::waypoints::Waypoints;

fn run(seed: u64, ticks: usize) -> TrafficState {
    let (city, _) = generate_city(&GenConfig { seed, ..Default::default() }).unwrap();
    let wp = Waypoints::build(&city.roads, &city.config.layout).unwrap();
    let blocked = blocked_waypoints(&city.scene, &wp.fine, 0.25);
    let ctx = TrafficContext { net: &city.roads, scene: &city.scene, graph: &wp.fine, static_blocked: &blocked };
    let mut st = TrafficState::new(seed, TrafficConfig { n_vehicles: 20, n_pedestrians: 30, ..Default::default() });
    spawn_population(&mut st, &ctx, city.scene.next_id().0, &[]).unwrap();
    for _ in 0..ticks {
        step_traffic(&mut st, &ctx, &[], 0.1);
        for v in &st.vehicles {
            assert!(v.speed >= 0.0 && v.speed <= st.config.v_max);
        }
    }
    st
}

#[test]
fn thousand_ticks_are_reproducible() {
    let t = std::time::Instant::now();
    let a = run(11, 1000);
    eprintln!("elapsed {:?}", t.elapsed());
    let b = run(11, 1000);
    assert_eq!(a.to_json(), b.to_json());
    let moving = a.vehicles.iter().filter(|v| v.route_cursor > 1).count();
    eprintln!("vehicles progressed: {moving}; speeds {:?}", a.vehicles.iter().map(|v| (v.speed * 10.0).round() / 10.0).collect::<Vec<_>>());
}
