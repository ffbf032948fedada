use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use urbanworld::delivery::{DeliveryRun, EconomyConfig};
use urbanworld::env::{ActionCommand, Verb};
use urbanworld::procgen::{generate_city, GenConfig};
use urbanworld::protocol::Session;
use urbanworld::waypoints::{astar, Mode, Waypoints};
use urbanworld_bench::{city, world};

fn procgen(c: &mut Criterion) {
    let cfg = GenConfig { seed: 1, city_extent: (520.0, 520.0), ..Default::default() };
    c.bench_function("generate_city_520m", |b| b.iter(|| generate_city(black_box(&cfg)).unwrap()));
    let map = city(1, 520.0);
    c.bench_function("build_waypoints_520m", |b| b.iter(|| Waypoints::build(&map.roads, &map.config.layout).unwrap()));
}

fn pathfinding(c: &mut Criterion) {
    let map = city(2, 520.0);
    let wp = Waypoints::build(&map.roads, &map.config.layout).unwrap();
    let ids: Vec<_> = wp.fine.nodes().iter().filter(|n| n.kind.mode() == Mode::Pedestrian).map(|n| n.id).collect();
    let (a, z) = (ids[0], ids[ids.len() - 1]);
    c.bench_function("astar_fine_across_city", |b| b.iter(|| astar(&wp.fine, black_box(a), black_box(z), Mode::Pedestrian)));
}

fn stepping(c: &mut Criterion) {
    let map = city(3, 520.0);
    let base = world(&map, 10, 20, 30);
    c.bench_function("step_sync_10_agents_50_traffic", |b| {
        b.iter_batched(
            || base.clone(),
            |mut w| {
                let cmds: Vec<_> = w.agents.keys().map(|id| ActionCommand::new(*id, Verb::StepForward)).collect();
                w.step_sync(&cmds).unwrap();
                w
            },
            BatchSize::LargeInput,
        )
    });
}

fn delivery(c: &mut Criterion) {
    let map = city(4, 520.0);
    let run = DeliveryRun::new(&map, 4, 20, EconomyConfig::default()).unwrap();
    c.bench_function("delivery_tick_20_agents", |b| {
        b.iter_batched(
            || DeliveryRun { world: run.world.clone(), economy: run.economy.clone(), fleet: run.fleet.clone() },
            |mut r| {
                r.step();
                r
            },
            BatchSize::LargeInput,
        )
    });
}

fn protocol(c: &mut Criterion) {
    let mut s = Session::new(city(5, 320.0), Default::default()).unwrap();
    s.handle_line(r#"{"id":1,"cmd":"agent.register","args":{"embodiment":"humanoid"}}"#);
    c.bench_function("protocol_observe", |b| b.iter(|| s.handle_line(black_box(r#"{"id":2,"cmd":"agent.observe","args":{"id":1000000}}"#))));
    c.bench_function("protocol_malformed", |b| b.iter(|| s.handle_line(black_box("{\"id\":3,\"cmd\""))));
}

criterion_group!(benches, procgen, pathfinding, stepping, delivery, protocol);
criterion_main!(benches);
