//! Acceptance suite. Every criterion runs on its own thread and reports one
//! line; the test fails if any line is FAIL.
//!
//!     cargo test -p urbanworld --test acceptance

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::oracles;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use urbanworld::delivery::{resolve_auction, Bid, DeliveryRun, EconomyConfig, OrderState};
use urbanworld::env::{ActionBuffer, ActionCommand, AgentSpawn, Embodiment, EnvConfig, ScenarioConfig, TrafficSpawn, Verb, World};
use urbanworld::geometry::Vec2;
use urbanworld::planner::{expand_rule_based, parse, run_program, HighLevelPlan, PlanAction, ProgramStatus, Vocabulary};
use urbanworld::procgen::{generate_city, CityMap, GenConfig};
use urbanworld::protocol::{parse_request, spawn_server};
use urbanworld::rng;
use urbanworld::tasks::*;
use urbanworld::traffic::{blocked_waypoints, spawn_population, step_traffic, PidState, TrafficConfig, TrafficContext, TrafficState};
use urbanworld::waypoints::{astar, path_cost, Mode, WaypointKind, Waypoints};
use urbanworld::world_model::{Category, EntityId};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond as bool) {
            return Err(format!($($fmt)+));
        }
    };
}

const CRITERIA: &[Criterion] = &[
    ("procgen determinism, connectivity, no blocking overlap", procgen),
    ("waypoint densities", waypoint_counts),
    ("obstacle mode keeps a free lane per group", obstacle_lanes),
    ("A* costs equal Dijkstra", astar_optimal),
    ("traffic determinism and PID envelope", traffic),
    ("sync and async stepping agree", sync_async),
    ("planner worked example and compiled paths", planner),
    ("delivery economy invariants", delivery),
    ("metric formula goldens", metrics),
    ("stuck detection", stuck),
    ("task generation counts", task_counts),
    ("protocol robustness and replay", protocol),
];

#[test]
fn acceptance() {
    let results: Vec<(Check, Duration)> = std::thread::scope(|s| {
        let handles: Vec<_> = CRITERIA
            .iter()
            .map(|&(_, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    (f(), t.elapsed())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| match h.join() {
                Ok(r) => r,
                Err(p) => {
                    let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
                    (Err(format!("panicked: {}", msg.unwrap_or_default())), Duration::ZERO)
                }
            })
            .collect()
    });
    let mut lines = Vec::new();
    for (k, ((name, _), (r, t))) in CRITERIA.iter().zip(&results).enumerate() {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        lines.push(format!("{tag} [{:02}] {name}: {detail} ({:.1}s)", k + 1, t.as_secs_f64()));
    }
    // Straight to the stderr handle: libtest only captures the print macros,
    // so the summary shows up even when the test passes.
    let mut err = std::io::stderr().lock();
    writeln!(err).unwrap();
    for l in &lines {
        writeln!(err, "{l}").unwrap();
    }
    let failed: Vec<&String> = lines.iter().filter(|l| l.starts_with("FAIL")).collect();
    assert!(failed.is_empty(), "{} of {} criteria failed:\n{}", failed.len(), lines.len(), lines.join("\n"));
}

fn city(seed: u64, obstacle_mode: bool) -> CityMap {
    generate_city(&GenConfig { seed, obstacle_mode, ..Default::default() }).expect("city generates").0
}

/// Five default-size cities shared by the waypoint criteria.
fn cities() -> &'static [CityMap] {
    static MAPS: OnceLock<Vec<CityMap>> = OnceLock::new();
    MAPS.get_or_init(|| (0..5).map(|s| city(s, false)).collect())
}

fn procgen() -> Check {
    let runs: Vec<Check> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..20u64)
            .map(|seed| {
                s.spawn(move || {
                    let a = city(seed, false);
                    ensure!(a.to_json() == city(seed, false).to_json(), "seed {seed}: two generations differ");
                    ensure!(oracles::roads_connected(&a.roads), "seed {seed}: road graph disconnected");
                    // Street elements may overlap each other; buildings overlap nothing.
                    let solid: Vec<_> =
                        a.scene.entities().filter(|e| e.blocking || e.category == Category::RoadSegment).map(|e| (e.id.0, e.footprint)).collect();
                    let building = |id: u64| a.scene.get(EntityId(id)).unwrap().category == Category::Building;
                    let pairs: Vec<_> = oracles::overlapping_pairs(&solid).into_iter().filter(|&(x, y)| building(x) || building(y)).collect();
                    ensure!(pairs.is_empty(), "seed {seed}: buildings overlap {:?}", &pairs[..pairs.len().min(5)]);
                    Ok(a.scene.entities().filter(|e| e.category == Category::Building).count().to_string())
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut buildings = 0;
    for r in runs {
        buildings += r?.parse::<usize>().unwrap();
    }
    Ok(format!("20 seeds byte-identical and connected, {buildings} buildings clear of roads and blocking entities"))
}

fn waypoint_counts() -> Check {
    let (mut sidewalks, mut crosswalks) = (0, 0);
    for (k, map) in cities().iter().enumerate() {
        let wp = Waypoints::build(&map.roads, &map.config.layout).map_err(|e| e.to_string())?;
        for ((seg, side), lanes) in &wp.fine.sidewalks {
            ensure!(lanes.len() == 4, "map {k} {seg:?}/{side:?}: {} lanes", lanes.len());
            for (l, lane) in lanes.iter().enumerate() {
                ensure!(lane.len() == 17, "map {k} {seg:?}/{side:?} lane {l}: {} waypoints", lane.len());
                ensure!(lane.iter().all(|w| wp.fine.node(*w).lane_index == Some(l as u8)), "map {k} {seg:?}/{side:?} lane {l}: wrong lane index");
            }
            sidewalks += 1;
        }
        ensure!(wp.fine.sidewalks.len() == 2 * map.roads.segments.len(), "map {k}: sidewalks missing");
        for cw in &wp.fine.crosswalks {
            ensure!(cw.nodes.len() == 8, "map {k}: crosswalk with {} waypoints", cw.nodes.len());
            crosswalks += 1;
        }
        ensure!(!wp.fine.crosswalks.is_empty(), "map {k}: no crosswalks");
        let g = &wp.coarse;
        ensure!(g.coarse_sidewalks.len() == 2 * map.roads.segments.len(), "map {k}: coarse sidewalks missing");
        for ((seg, side), [a, m, b]) in &g.coarse_sidewalks {
            let (pa, pm, pb) = (g.position(*a), g.position(*m), g.position(*b));
            let mid = Vec2::new((pa.x + pb.x) / 2.0, (pa.y + pb.y) / 2.0);
            ensure!(pm.sub(mid).length() < 1e-9, "map {k} {seg:?}/{side:?}: mid is not the midpoint");
            let s = map.roads.segment(*seg);
            ensure!(pa.sub(s.a).length() < pb.sub(s.a).length(), "map {k} {seg:?}/{side:?}: start is not at the a end");
        }
        ensure!(g.coarse_intersections.len() == map.roads.intersections.len(), "map {k}: coarse intersections missing");
    }
    Ok(format!("{sidewalks} sidewalks of 4x17, {crosswalks} crosswalks of 8, coarse start/mid/end on 5 maps"))
}

fn obstacle_lanes() -> Check {
    let clearance = EnvConfig::default().humanoid_size / 2.0;
    let (mut groups, mut partly_blocked) = (0, 0);
    for seed in 100..110 {
        let map = city(seed, true);
        let wp = Waypoints::build(&map.roads, &map.config.layout).map_err(|e| e.to_string())?;
        let blocked = blocked_waypoints(&map.scene, &wp.fine, clearance);
        for ((seg, side), lanes) in &wp.fine.sidewalks {
            for i in 0..lanes[0].len() {
                let free = lanes.iter().filter(|l| !blocked.contains(&l[i])).count();
                ensure!(free > 0, "seed {seed} {seg:?}/{side:?} group {i}: every lane blocked");
                groups += 1;
                partly_blocked += usize::from(free < lanes.len());
            }
        }
    }
    ensure!(partly_blocked > 0, "no obstacles placed at all");
    Ok(format!("{groups} lateral groups on 10 maps all passable, {partly_blocked} partly blocked"))
}

fn astar_optimal() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut found, mut none) = (0, 0);
    for (k, map) in cities().iter().enumerate() {
        let g = &Waypoints::build(&map.roads, &map.config.layout).map_err(|e| e.to_string())?.fine;
        let of = |m: Mode| g.nodes().iter().filter(|n| n.kind.mode() == m).map(|n| n.id).collect::<Vec<_>>();
        let (peds, cars) = (of(Mode::Pedestrian), of(Mode::Vehicle));
        for q in 0..100 {
            let (pool, mode) = if q % 4 == 3 { (&cars, Mode::Vehicle) } else { (&peds, Mode::Pedestrian) };
            let (a, b) = (pool[rng.random_range(0..pool.len())], pool[rng.random_range(0..pool.len())]);
            let oracle = common::dijkstra(g, a, b, |_| true);
            match astar(g, a, b, mode) {
                Ok(path) => {
                    let cost = path_cost(g, &path);
                    ensure!(cost.is_some() && cost == oracle, "map {k} {a}->{b}: A* {cost:?}, Dijkstra {oracle:?}");
                    found += 1;
                }
                Err(_) => {
                    ensure!(oracle.is_none(), "map {k} {a}->{b}: A* found nothing, Dijkstra {oracle:?}");
                    none += 1;
                }
            }
        }
    }
    Ok(format!("500 queries, {found} equal-cost paths, {none} agreed unreachable"))
}

fn traffic() -> Check {
    let run = |seed: u64| -> Result<String, String> {
        let map = city(seed, false);
        let wp = Waypoints::build(&map.roads, &map.config.layout).map_err(|e| e.to_string())?;
        let blocked = blocked_waypoints(&map.scene, &wp.fine, 0.25);
        let ctx = TrafficContext { net: &map.roads, scene: &map.scene, graph: &wp.fine, static_blocked: &blocked };
        let mut st = TrafficState::new(seed, TrafficConfig { n_vehicles: 20, n_pedestrians: 30, ..Default::default() });
        spawn_population(&mut st, &ctx, map.scene.next_id().0, &[]).map_err(|e| e.to_string())?;
        for _ in 0..1000 {
            step_traffic(&mut st, &ctx, &[], 0.1);
            ensure!(st.vehicles.iter().all(|v| v.speed >= 0.0 && v.speed <= st.config.v_max), "speed out of range");
        }
        Ok(st.to_json())
    };
    ensure!(run(11)? == run(11)?, "two 1000-tick runs differ");

    let cfg = TrafficConfig::default();
    let mut pid = PidState::new(cfg.kp, cfg.ki, cfg.kd, cfg.integral_clamp);
    let (mut v, mut peak, mut reached) = (0.0f64, 0.0f64, None);
    for k in 1..=300 {
        v = (v + pid.update(10.0 - v, 0.1, cfg.a_min, cfg.a_max) * 0.1).clamp(0.0, cfg.v_max);
        peak = peak.max(v);
        if reached.is_none() && (v - 10.0).abs() <= 0.5 {
            reached = Some(k as f64 * 0.1);
        }
    }
    let reached = reached.ok_or("never within 5% of 10 m/s")?;
    ensure!(reached <= 8.0, "reached 10 m/s band after {reached:.1}s");
    ensure!(peak <= 11.0, "peak speed {peak:.3}");
    Ok(format!("1000 ticks x 20 vehicles x 30 pedestrians identical; 10 m/s band at {reached:.1}s, peak {peak:.2}"))
}

fn sync_async() -> Check {
    let map = generate_city(&GenConfig { seed: 8, city_extent: (320.0, 320.0), ..Default::default() }).unwrap().0;
    let (probe, _) = World::reset(&map, &ScenarioConfig::default()).map_err(|e| e.to_string())?;
    let spawn =
        probe.waypoints.fine.nodes().iter().find(|n| n.kind == WaypointKind::FineSidewalk && !probe.static_blocked.contains(&n.id)).unwrap().id;
    for seed in [1u64, 2, 3] {
        let sc = ScenarioConfig {
            seed,
            agents: vec![AgentSpawn { embodiment: Embodiment::Humanoid, spawn_waypoint: spawn, yaw: Some(0.0), vitals: None }],
            traffic: TrafficSpawn { n_vehicles: 4, n_pedestrians: 6 },
            ..Default::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let steps: Vec<Verb> = (0..200)
            .map(|_| match r.random_range(0..5) {
                0 => Verb::Rotate { theta: r.random_range(-1.0..1.0) },
                1 => Verb::DoNothing,
                _ => Verb::StepForward,
            })
            .collect();
        let (mut s, _) = World::reset(&map, &sc).map_err(|e| e.to_string())?;
        let id = *s.agents.keys().next().unwrap();
        for v in &steps {
            s.step_sync(&[ActionCommand::new(id, v.clone())]).map_err(|e| e.to_string())?;
        }
        let (mut a, _) = World::reset(&map, &sc).map_err(|e| e.to_string())?;
        let buffer = ActionBuffer::new();
        let mut k = 0;
        let mut source = |_: u64, _: &BTreeMap<u64, _>, b: &ActionBuffer| {
            b.submit(ActionCommand::new(id, steps[k].clone())).unwrap();
            k += 1;
        };
        a.run_async(&mut source, &buffer, 0.1, 20.0).map_err(|e| e.to_string())?;
        ensure!(s.state_json() == a.state_json(), "seed {seed}: states differ after 200 ticks");
    }
    Ok("3 seeds x 200 ticks byte-identical".into())
}

fn planner() -> Check {
    let vocab = Vocabulary::default();
    let (mut w, id) = common::example_world();
    let plan = parse("go to the nearest chair and sit down", &vocab).map_err(|e| e.to_string())?;
    let mut prog = expand_rule_based(&plan, &w, id, &vocab).map_err(|e| e.to_string())?;
    let leg = prog.legs().next().ok_or("no navigation leg")?.clone();
    let pts: Vec<(f64, f64)> = leg.hops.iter().map(|h| w.waypoints.fine.position(*h)).map(|p| (p.x, p.y)).collect();
    ensure!(pts == [(0.0, 0.0), (0.0, 1.0), (1.0, 10.0), (10.0, 10.0)], "hops {pts:?}");
    ensure!(matches!(prog.queue.back(), Some(PlanAction::Primitive(Verb::SitDown))), "plan does not end in sit_down");
    run_program(&mut prog, &mut w, 500).map_err(|e| e.to_string())?;
    ensure!(prog.status == ProgramStatus::Done && w.agents[&id].status_flags.seated, "agent not seated");

    let map = generate_city(&GenConfig { seed: 21, city_extent: (320.0, 320.0), ..Default::default() }).unwrap().0;
    let (w0, _) = World::reset(&map, &ScenarioConfig::default()).map_err(|e| e.to_string())?;
    let free: Vec<_> = w0
        .waypoints
        .fine
        .nodes()
        .iter()
        .filter(|p| p.kind == WaypointKind::FineSidewalk && !w0.static_blocked.contains(&p.id))
        .map(|p| p.id)
        .collect();
    let sc = ScenarioConfig {
        agents: vec![AgentSpawn { embodiment: Embodiment::Humanoid, spawn_waypoint: free[7], yaw: None, vitals: None }],
        ..Default::default()
    };
    let (w, _) = World::reset(&map, &sc).map_err(|e| e.to_string())?;
    let id = *w.agents.keys().next().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let goal = free[r.random_range(0..free.len())];
        let plan = HighLevelPlan {
            steps: vec![serde_json::from_value(json!({"verb": "navigate", "args": {"target": {"waypoint": goal.0}}})).unwrap()],
            source_text: String::new(),
        };
        let prog = expand_rule_based(&plan, &w, id, &vocab).map_err(|e| e.to_string())?;
        let leg = prog.legs().next().ok_or("no leg")?;
        let oracle = common::dijkstra(&w.waypoints.fine, leg.hops[0], goal, |n| !w.static_blocked.contains(&n));
        ensure!(path_cost(&w.waypoints.fine, &leg.hops) == oracle, "target {goal}: compiled cost differs from Dijkstra");
    }
    Ok("worked example hops (0,0)->(0,1)->(1,10)->(10,10) then seated; 30 targets shortest".into())
}

fn delivery() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = r.random_range(0..8);
        let bids: Vec<Bid> = (0..n).map(|a| Bid { agent: a, price: r.random_range(1..20), tick: r.random_range(0..5) }).collect();
        let load: BTreeMap<u64, usize> = (0..n).map(|a| (a, r.random_range(0..3))).collect();
        ensure!(resolve_auction(&bids, |a| load[&a], 2) == oracles::scan_oracle(&bids, &load, 2), "auction differs from scan");
    }

    let cfg = EconomyConfig { hunger_rate: 0.9, ..Default::default() };
    let mut run = DeliveryRun::new(common::small_city(), 5, 20, cfg).map_err(|e| e.to_string())?;
    let mut auctions = 0;
    for _ in 0..5000 {
        let cmds = run.fleet.act(&mut run.economy, &mut run.world);
        run.world.step_sync(&cmds).map_err(|e| e.to_string())?;
        let closing = run.world.tick.is_multiple_of(run.economy.config.order_window);
        let expected = closing.then(|| oracles::expected_winners(&run.economy, run.world.tick));
        run.economy.step_economy(&mut run.world);
        for (order, winner) in expected.into_iter().flatten() {
            let o = &run.economy.orders[&order];
            match winner {
                Some(a) => ensure!(o.assignee == Some(a), "order {order}: winner {:?}, scan says {a}", o.assignee),
                None => ensure!(matches!(o.state, OrderState::Open | OrderState::Failed), "order {order} assigned without bids"),
            }
            auctions += 1;
        }
        for (id, l) in &run.economy.ledgers {
            let v = &run.world.agents[id].vitals;
            ensure!(v.energy >= 0.0 && v.money >= 0, "agent {id}: negative energy or money at tick {}", run.world.tick);
            ensure!(l.o_delay.is_subset(&l.o_succ) && l.o_succ.is_subset(&l.o_bid), "agent {id}: order sets not nested");
        }
    }
    ensure!(auctions >= 100, "only {auctions} auctions");
    for (id, l) in &run.economy.ledgers {
        let money = run.world.agents[id].vitals.money;
        let flows: i64 = l.transactions.iter().map(|t| t.amount).sum();
        ensure!(money - l.initial_money == flows, "agent {id}: money drifted from its transactions");
    }
    let delivered = run.economy.orders.values().filter(|o| o.state == OrderState::Delivered).count();
    let csv = run.economy.report().to_csv("greedy");
    let lines: Vec<&str> = csv.lines().collect();
    ensure!(lines[0] == "model,agent_id,profit,successful_orders,energy_efficiency,sharing_count,investment_count", "header {}", lines[0]);
    ensure!(lines.len() == 23 && lines[21].starts_with("greedy,avg,") && lines[22].starts_with("greedy,std,"), "bad CSV rows");
    Ok(format!("5000 ticks x 20 agents: {auctions} auctions match the scan, {delivered} delivered, books balance"))
}

#[allow(clippy::too_many_arguments)]
fn rec(success: bool, total: usize, done: usize, d0: f64, dt: f64, cs: u64, cd: u64, red: u64, dec: u64, w: u64, stuck: bool) -> EpisodeRecord {
    EpisodeRecord {
        task_id: 0,
        success,
        subtasks_total: total,
        subtasks_completed: done,
        d0,
        d_t: dt,
        inter_d0: None,
        inter_d_t: None,
        collisions_static: cs,
        collisions_dynamic: cd,
        red_light: red,
        decisions: dec,
        fine_waypoints: w,
        stuck,
        ticks_used: 0,
    }
}

fn metrics() -> Check {
    ensure!(rec(false, 4, 2, 1.0, 1.0, 0, 0, 0, 0, 0, false).ssr() == Some(0.5), "SSR(2 of 4)");
    ensure!(progress(10.0, 4.0) == Some(0.6), "DP(10, 4)");
    ensure!(progress(10.0, 15.0) == Some(0.0), "DP(10, 15)");
    let mut t = rec(true, 0, 0, 10.0, 4.0, 0, 0, 0, 0, 0, false);
    t.inter_d0 = Some(10.0);
    t.inter_d_t = Some(4.0);
    ensure!(t.tp() == Some(0.6), "TP mirrors DP");

    let records = [
        rec(true, 4, 4, 20.0, 1.0, 1, 0, 0, 40, 20, false),
        rec(true, 5, 5, 30.0, 2.0, 0, 2, 1, 90, 30, false),
        rec(false, 4, 2, 10.0, 4.0, 3, 1, 2, 100, 25, true),
        rec(false, 3, 0, 10.0, 15.0, 0, 0, 0, 10, 12, false),
        rec(false, 6, 3, 0.0, 5.0, 2, 2, 0, 50, 20, true),
        rec(true, 2, 2, 8.0, 0.0, 0, 0, 3, 16, 8, false),
    ];
    let m = compute_metrics(&records, MetricFamily::Multimodal);
    let want = [
        ("SR", m.sr, 0.5),
        ("SSR", m.ssr, (1.0 + 1.0 + 0.5 + 0.0 + 0.5 + 1.0) / 6.0),
        ("DP", m.dp, (19.0 / 20.0 + 28.0 / 30.0 + 0.6 + 0.0 + 1.0) / 5.0),
        ("RVR", m.rvr, 2.0 / 3.0),
        ("STR", m.str_, 2.0 / 3.0),
        ("NDC", m.ndc, 7.0 / 3.0),
        ("DSS", m.dss, 146.0 / 3.0),
    ];
    for (name, got, expect) in want {
        ensure!(got.is_some_and(|g| (g - expect).abs() <= 1e-12), "{name}: {got:?} vs {expect}");
    }
    ensure!((m.cc, m.cc_static, m.cc_dynamic, m.cc_s) == (11, 6, 5, 3), "collision counts");
    Ok("SSR, DP, TP goldens exact; 6-record suite within 1e-12".into())
}

fn stuck() -> Check {
    let (mut world, agent) = common::example_world();
    let window = (120.0 / world.config.dt).round() as u64;
    let mut samples = Vec::new();
    for _ in 0..=window {
        world.step_sync(&[ActionCommand::new(agent, Verb::Rotate { theta: 0.3 })]).map_err(|e| e.to_string())?;
        samples.push(TrailSample { tick: world.tick, position: world.agents[&agent].pose.position(), subtasks_completed: 0 });
    }
    ensure!(detect_stuck(&samples, window, 1.0), "rotating in place for {window} ticks not flagged");
    let walking: Vec<TrailSample> =
        (0..=window + 100).map(|t| TrailSample { tick: t, position: Vec2::new(t as f64 * 0.05, 0.0), subtasks_completed: 0 }).collect();
    ensure!(!detect_stuck(&walking, window, 1.0), "steady walk flagged as stuck");
    Ok(format!("2-minute rotation ({window} ticks) flagged, steady walk not"))
}

fn task_counts() -> Check {
    let map = TaskMap::new(common::small_city()).map_err(|e| e.to_string())?;
    let tasks = gen_physical_tasks(&map, 10, &TaskConfig::default(), &mut rng::substream(3, rng::streams::TASKS, 0)).map_err(|e| e.to_string())?;
    ensure!(tasks.len() == 40, "{} physical tasks", tasks.len());
    for level in Difficulty::ALL {
        let n = tasks.iter().filter(|t| t.difficulty == level).count();
        ensure!(n == 10, "{level:?}: {n} tasks");
    }
    let multi = gen_multimodal_tasks(&map, 20, &TaskConfig::default(), &mut rng::substream(17, rng::streams::TASKS, 1)).map_err(|e| e.to_string())?;
    ensure!(multi.len() == 20, "{} multimodal tasks", multi.len());
    let mut turns = 0;
    for t in &multi {
        let subs = t.subtasks.as_ref().ok_or("multimodal task without subtasks")?;
        let n = subs.iter().filter(|s| s.kind == SubTaskKind::TurningAtIntersection).count();
        let oracle = oracles::yaw_changes(&map, &t.route);
        ensure!(n == oracle, "task {}: {n} turning subtasks, {oracle} yaw changes", t.id);
        turns += n;
    }
    Ok(format!("40 physical tasks (10 per level); 20 multimodal tasks, {turns} turns match yaw changes"))
}

fn protocol() -> Check {
    let mut s = oracles::session();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut malformed = 0;
    for _ in 0..100_000 {
        let line = oracles::malformed_line(&mut r);
        let out = s.handle_line(&line);
        let v: Value = serde_json::from_str(&out).map_err(|e| format!("unparseable response {out}: {e}"))?;
        ensure!(!out.contains('\n'), "multi-line response");
        if parse_request(&line).is_err() {
            ensure!(v["error"]["code"] == "malformed", "{line:?} answered {out}");
            malformed += 1;
        }
    }

    let replay = oracles::transcript();
    ensure!(replay == oracles::transcript(), "transcript differs between replays");
    let golden = std::fs::read_to_string(std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/transcript.jsonl"))
        .map_err(|e| format!("golden transcript: {e}"))?;
    ensure!(replay.join("\n") + "\n" == golden, "transcript differs from golden");

    let addr = spawn_server("127.0.0.1:0", oracles::session()).map_err(|e| e.to_string())?;
    let clients: Vec<_> = (0..4u64)
        .map(|c| {
            std::thread::spawn(move || -> Result<usize, String> {
                let stream = TcpStream::connect(addr).map_err(|e| e.to_string())?;
                let mut w = stream.try_clone().unwrap();
                let mut rd = BufReader::new(stream);
                let mut seen = BTreeSet::new();
                for batch in 0..10u64 {
                    let ids: Vec<u64> = (0..50).map(|k| 1 + c * 10_000 + batch * 100 + k).collect();
                    let out: String = ids.iter().map(|id| json!({ "id": id, "cmd": "world.info" }).to_string() + "\n").collect();
                    w.write_all(out.as_bytes()).map_err(|e| e.to_string())?;
                    for _ in 0..50 {
                        let mut line = String::new();
                        rd.read_line(&mut line).map_err(|e| e.to_string())?;
                        let v: Value = serde_json::from_str(&line).map_err(|e| e.to_string())?;
                        let id = v["id"].as_u64().ok_or("response without id")?;
                        ensure!(ids.contains(&id) && seen.insert(id), "client {c}: unexpected or repeated id {id}");
                    }
                }
                Ok(seen.len())
            })
        })
        .collect();
    let mut answered = 0;
    for h in clients {
        answered += h.join().map_err(|_| "client panicked")??;
    }
    ensure!(answered == 2000, "{answered} of 2000 answered");
    Ok(format!("{malformed} malformed of 100000 fuzzed lines answered; golden replay identical; 2000 requests over 4 clients answered once"))
}
