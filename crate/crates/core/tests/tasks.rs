mod common;

use common::oracles::yaw_changes;

use proptest::prelude::*;
use urbanworld::env::{AgentSpawn, Embodiment, ScenarioConfig, Verb, World};
use urbanworld::geometry::{Pose2D, Vec2};
use urbanworld::rng;
use urbanworld::tasks::*;
use urbanworld::waypoints::{path_cost, WaypointKind};

fn city_tasks() -> &'static TaskMap {
    static MAP: std::sync::OnceLock<TaskMap> = std::sync::OnceLock::new();
    MAP.get_or_init(|| TaskMap::new(common::small_city()).unwrap())
}

fn l_city() -> TaskMap {
    // Road east along y=100, then north along x=200. A north of the first
    // leg, B east of the second.
    let map = common::hand_city(
        &[(100.0, 100.0), (200.0, 100.0), (200.0, 200.0)],
        &[(0, 1), (1, 2)],
        &[(1, 130.0, 112.0, 150.0, 126.0, "bakery"), (2, 212.0, 160.0, 226.0, 175.0, "museum"), (3, 160.0, 112.0, 190.0, 140.0, "office")],
    );
    TaskMap::new(&map).unwrap()
}

#[test]
fn forty_physical_tasks_ten_per_level() {
    let map = city_tasks();
    let mut r = rng::substream(3, rng::streams::TASKS, 0);
    let tasks = gen_physical_tasks(map, 10, &TaskConfig::default(), &mut r).unwrap();
    assert_eq!(tasks.len(), 40);
    let g = &map.waypoints.coarse;
    for level in Difficulty::ALL {
        let of: Vec<&NavTask> = tasks.iter().filter(|t| t.difficulty == level).collect();
        assert_eq!(of.len(), 10);
        let (lo, hi) = level.segment_range();
        for t in of {
            let n = route_segments(g, &t.route);
            assert!(n >= lo && n <= hi, "{level:?} route touches {n} segments");
            assert_eq!(t.obstacle_mode, matches!(level, Difficulty::Hard | Difficulty::Dynamic));
            assert_eq!(t.pedestrians, level == Difficulty::Dynamic);
            assert_eq!((t.route[0], *t.route.last().unwrap()), (t.start, t.goal));
            assert_eq!(path_cost(g, &t.route), common::dijkstra(g, t.start, t.goal, |_| true), "task {}", t.id);
        }
    }
    let mut ids: Vec<u64> = tasks.iter().map(|t| t.id).collect();
    ids.dedup();
    assert_eq!(ids.len(), 40);
}

#[test]
fn physical_tasks_are_deterministic_and_infeasible_levels_error() {
    let map = city_tasks();
    let gen = |seed| gen_physical_tasks(map, 3, &TaskConfig::default(), &mut rng::substream(seed, rng::streams::TASKS, 0)).unwrap();
    assert_eq!(gen(8), gen(8));
    let l = l_city();
    let err = gen_physical_tasks(&l, 1, &TaskConfig { max_attempts: 200, ..Default::default() }, &mut rng::substream(1, rng::streams::TASKS, 0));
    assert!(matches!(err, Err(TaskError::InfeasibleMap(_))));
}

fn check_shape(subs: &[SubTask]) {
    assert_eq!(subs.first().unwrap().kind, SubTaskKind::OrientationAlignment);
    assert_eq!(subs.last().unwrap().kind, SubTaskKind::ReachDestination);
    let middle: Vec<SubTaskKind> = subs[1..subs.len() - 1].iter().map(|s| s.kind).collect();
    for (i, k) in middle.iter().enumerate() {
        let want = if i % 2 == 0 { SubTaskKind::MoveAlongRoad } else { SubTaskKind::TurningAtIntersection };
        assert_eq!(*k, want);
    }
    assert!(middle.is_empty() || *middle.last().unwrap() == SubTaskKind::MoveAlongRoad);
}

#[test]
fn l_shaped_walk_has_one_left_turn() {
    let map = l_city();
    let subs = gen_multimodal_subtasks(&map, 1, 2, &TaskConfig::default()).unwrap();
    check_shape(&subs);
    let kinds: Vec<SubTaskKind> = subs.iter().map(|s| s.kind).collect();
    assert_eq!(
        kinds,
        [
            SubTaskKind::OrientationAlignment,
            SubTaskKind::MoveAlongRoad,
            SubTaskKind::TurningAtIntersection,
            SubTaskKind::MoveAlongRoad,
            SubTaskKind::ReachDestination
        ]
    );
    assert_eq!(subs[2].turn, Some(Turn::Left));
    // The office is the largest building on the first leg; the goal building
    // never names a stretch.
    assert_eq!(subs[1].landmark, Some(3));
    assert!(subs[1].instruction.contains("office"));
    assert_eq!(subs[4].landmark, Some(2));
    assert!((subs[1].goal_yaw - 0.0).abs() < 1e-9);
    assert!((subs[3].goal_yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    // The reverse walk turns right.
    let back = gen_multimodal_subtasks(&map, 2, 1, &TaskConfig::default()).unwrap();
    assert_eq!(back.iter().filter(|s| s.kind == SubTaskKind::TurningAtIntersection).count(), 1);
    assert_eq!(back[2].turn, Some(Turn::Right));
}

#[test]
fn same_door_gives_align_then_arrive() {
    let map = l_city();
    let subs = gen_multimodal_subtasks(&map, 1, 1, &TaskConfig::default()).unwrap();
    let kinds: Vec<SubTaskKind> = subs.iter().map(|s| s.kind).collect();
    assert_eq!(kinds, [SubTaskKind::OrientationAlignment, SubTaskKind::ReachDestination]);
    assert!(matches!(gen_multimodal_subtasks(&map, 1, 99, &TaskConfig::default()), Err(TaskError::UnknownEntity(99))));
}

#[test]
fn turning_subtasks_match_path_yaw_changes() {
    let map = city_tasks();
    let mut r = rng::substream(17, rng::streams::TASKS, 1);
    let tasks = gen_multimodal_tasks(map, 20, &TaskConfig::default(), &mut r).unwrap();
    assert_eq!(tasks.len(), 20);
    let mut total_turns = 0;
    for t in &tasks {
        let subs = t.subtasks.as_ref().unwrap();
        check_shape(subs);
        let turns = subs.iter().filter(|s| s.kind == SubTaskKind::TurningAtIntersection).count();
        assert_eq!(turns, yaw_changes(map, &t.route), "task {}", t.id);
        assert!(subs.iter().all(|s| s.kind != SubTaskKind::TurningAtIntersection || s.turn.is_some()));
        total_turns += turns;
    }
    assert!(total_turns > 0);
}

#[test]
fn search_task_on_one_street() {
    let map = common::hand_city(
        &[(100.0, 100.0), (200.0, 100.0)],
        &[(0, 1)],
        &[(1, 110.0, 112.0, 125.0, 126.0, "bank"), (2, 140.0, 112.0, 155.0, 126.0, "school"), (3, 170.0, 112.0, 185.0, 126.0, "cafe")],
    );
    let map = TaskMap::new(&map).unwrap();
    for seed in 0..20 {
        let t = gen_search_task(&map, 2, &mut rng::substream(seed, rng::streams::TASKS, 2)).unwrap();
        assert_eq!(t.main_memory.len(), 2);
        assert_ne!(t.spawns[0], t.spawns[1]);
        for (id, pose) in &t.main_memory {
            assert!([1, 2, 3].contains(id));
            assert_eq!(Some(pose.position()), map.front_door(*id).ok().map(|w| map.waypoints.fine.position(w)));
        }
    }
}

#[test]
fn search_memory_covers_every_street_with_a_landmark() {
    let map = city_tasks();
    let g = &map.waypoints.fine;
    let streets: std::collections::BTreeSet<u32> = map
        .scene
        .entities()
        .filter(|e| e.has_tag("landmark"))
        .filter_map(|e| g.node(map.front_door(e.id.0).unwrap()).segment_id.map(|s| s.0))
        .collect();
    assert!(!streets.is_empty());
    for seed in 0..100 {
        let t = gen_search_task(map, 1, &mut rng::substream(seed, rng::streams::TASKS, 2)).unwrap();
        let covered: std::collections::BTreeSet<u32> =
            t.main_memory.iter().map(|(id, _)| g.node(map.front_door(*id).unwrap()).segment_id.unwrap().0).collect();
        assert_eq!(covered, streets);
        assert_eq!(t.main_memory.len(), streets.len());
        assert_ne!(t.spawns[0], t.spawns[1]);
    }
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

#[test]
fn formula_goldens() {
    assert_eq!(rec(false, 4, 2, 1.0, 1.0, 0, 0, 0, 0, 0, false).ssr(), Some(0.5));
    assert_eq!(progress(10.0, 4.0), Some(0.6));
    assert_eq!(progress(10.0, 15.0), Some(0.0));
    assert_eq!(progress(0.0, 3.0), None);
    let mut r = rec(true, 0, 0, 10.0, 4.0, 0, 0, 0, 0, 0, false);
    r.inter_d0 = Some(10.0);
    r.inter_d_t = Some(4.0);
    assert_eq!(r.tp(), r.dp());
    r.inter_d_t = Some(15.0);
    assert_eq!(r.tp(), Some(0.0));
}

#[test]
fn six_record_suite_matches_hand_computation() {
    let records = [
        rec(true, 4, 4, 20.0, 1.0, 1, 0, 0, 40, 20, false),
        rec(true, 5, 5, 30.0, 2.0, 0, 2, 1, 90, 30, false),
        rec(false, 4, 2, 10.0, 4.0, 3, 1, 2, 100, 25, true),
        rec(false, 3, 0, 10.0, 15.0, 0, 0, 0, 10, 12, false),
        rec(false, 6, 3, 0.0, 5.0, 2, 2, 0, 50, 20, true),
        rec(true, 2, 2, 8.0, 0.0, 0, 0, 3, 16, 8, false),
    ];
    let m = compute_metrics(&records, MetricFamily::Multimodal);
    let close = |got: Option<f64>, want: f64| assert!((got.unwrap() - want).abs() < 1e-12, "{got:?} vs {want}");
    close(m.sr, 0.5);
    close(m.ssr, (1.0 + 1.0 + 0.5 + 0.0 + 0.5 + 1.0) / 6.0);
    close(m.dp, (19.0 / 20.0 + 28.0 / 30.0 + 0.6 + 0.0 + 1.0) / 5.0);
    assert_eq!((m.cc, m.cc_static, m.cc_dynamic, m.cc_s), (11, 6, 5, 3));
    close(m.rvr, 2.0 / 3.0);
    close(m.str_, 2.0 / 3.0);
    close(m.ndc, (2.0 + 3.0 + 2.0) / 3.0);
    close(m.dss, 146.0 / 3.0);
    assert_eq!((m.n_total, m.n_success, m.n_failed, m.n_stuck), (6, 3, 3, 2));
    assert_eq!((m.tp, m.csr), (None, None));

    let nav = compute_metrics(&records, MetricFamily::Navigation);
    assert_eq!(nav.ssr, None);
    assert_eq!(nav.sr, m.sr);
    let search = compute_metrics(&records, MetricFamily::Search);
    assert_eq!((search.sr, search.csr, search.dp), (None, Some(0.5), None));

    let none = compute_metrics(&records[2..5], MetricFamily::Navigation);
    assert_eq!((none.rvr, none.ndc, none.dss), (None, None, None));
    let all_ok = compute_metrics(&records[..2], MetricFamily::Navigation);
    assert_eq!(all_ok.str_, None);
    let csv = m.to_csv();
    assert!(csv.starts_with("metric,value\n"));
    assert!(csv.contains("\nCC-S,3\n") && csv.contains("\nTP,\n"));
}

proptest! {
    #[test]
    fn rates_stay_in_unit_interval(
        raw in prop::collection::vec((any::<bool>(), 0usize..6, 0usize..6, 0.0f64..50.0, 0.0f64..80.0, 0u64..5, 0u64..4, 0u64..200, 0u64..60, any::<bool>()), 1..12),
    ) {
        let records: Vec<EpisodeRecord> = raw
            .iter()
            .map(|&(ok, n, c, d0, dt, col, red, dec, w, stuck)| rec(ok, n, c.min(n), d0, dt, col, col / 2, red, dec, w, stuck))
            .collect();
        for fam in [MetricFamily::Navigation, MetricFamily::Multimodal, MetricFamily::Search] {
            let m = compute_metrics(&records, fam);
            for v in [m.sr, m.ssr, m.dp, m.tp, m.csr, m.rvr, m.str_].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(m.cc_s <= m.cc);
        }
    }
}

fn trail(points: impl Iterator<Item = (u64, Vec2)>) -> Vec<TrailSample> {
    points.map(|(tick, position)| TrailSample { tick, position, subtasks_completed: 0 }).collect()
}

#[test]
fn stuck_detection_on_constructed_traces() {
    let w = 1200;
    let still = trail((0..=1300).map(|t| (t, Vec2::new(5.0, 5.0))));
    assert!(detect_stuck(&still, w, 1.0));
    let walking = trail((0..=1300).map(|t| (t, Vec2::new(t as f64 * 0.05, 0.0))));
    assert!(!detect_stuck(&walking, w, 1.0));
    let wobble = trail((0..=1300).map(|t| (t, Vec2::new(if t % 2 == 0 { 0.4 } else { -0.4 }, 0.0))));
    assert!(detect_stuck(&wobble, w, 1.0));
    // Too short to judge.
    assert!(!detect_stuck(&still[..1000], w, 1.0));
    // A subtask completed inside the window clears it.
    let mut progress = still.clone();
    for s in progress.iter_mut().filter(|s| s.tick > 1250) {
        s.subtasks_completed = 1;
    }
    assert!(!detect_stuck(&progress, w, 1.0));
}

#[test]
fn rotating_in_place_for_two_minutes_is_stuck() {
    let (mut world, agent) = common::example_world();
    let window = (120.0 / world.config.dt).round() as u64;
    assert_eq!(window, TaskConfig::default().stuck_window);
    let mut samples = Vec::new();
    for _ in 0..=window {
        world.step_sync(&[urbanworld::env::ActionCommand::new(agent, Verb::Rotate { theta: 0.3 })]).unwrap();
        samples.push(TrailSample { tick: world.tick, position: world.agents[&agent].pose.position(), subtasks_completed: 0 });
    }
    assert!(detect_stuck(&samples, window, 1.0));
}

#[test]
fn evaluate_thresholds() {
    let cfg = TaskConfig::default();
    let goal = Vec2::new(10.0, 0.0);
    assert!(judge_navigation(&Pose2D::new(8.0, 0.0, 0.5), goal, 0.0, &cfg));
    assert!(judge_navigation(&Pose2D::new(10.0, 3.0, 30f64.to_radians()), goal, 0.0, &cfg));
    assert!(!judge_navigation(&Pose2D::new(10.0, 3.1, 0.0), goal, 0.0, &cfg));
    assert!(!judge_navigation(&Pose2D::new(10.0, 0.0, 31f64.to_radians()), goal, 0.0, &cfg));
    assert!(judge_navigation(&Pose2D::new(10.0, 0.0, -3.1), goal, 3.1, &cfg));
}

fn two_robots(gap: f64) -> (World, u64, u64) {
    let map = common::hand_city(&[(100.0, 100.0), (300.0, 100.0)], &[(0, 1)], &[]);
    let wp = urbanworld::waypoints::Waypoints::build(&map.roads, &map.config.layout).unwrap();
    let pick = |x: f64| wp.fine.nearest_where(Vec2::new(x, 108.0), |w| w.kind == WaypointKind::FineSidewalk).unwrap();
    let sc = ScenarioConfig {
        agents: vec![
            AgentSpawn { embodiment: Embodiment::Robot, spawn_waypoint: pick(150.0), yaw: Some(0.0), vitals: None },
            AgentSpawn { embodiment: Embodiment::Robot, spawn_waypoint: pick(150.0 + gap), yaw: Some(0.0), vitals: None },
        ],
        ..Default::default()
    };
    let (w, _) = World::reset(&map, &sc).unwrap();
    let ids: Vec<u64> = w.agents.keys().copied().collect();
    (w, ids[0], ids[1])
}

#[test]
fn search_success_needs_the_other_robot_in_view() {
    let cfg = TaskConfig::default();
    let (w, a, b) = two_robots(10.0);
    assert!(judge_search(&w, a, b, &cfg));
    let (w, a, b) = two_robots(25.0);
    assert!(!judge_search(&w, a, b, &cfg));
}

#[test]
fn easy_episodes_succeed_and_event_counts_replay() {
    let map = common::small_city();
    let tm = city_tasks();
    let mut r = rng::substream(21, rng::streams::TASKS, 0);
    let tasks = gen_physical_tasks(tm, 3, &TaskConfig::default(), &mut r).unwrap();
    let cfg = TaskConfig::default();
    let mut records = Vec::new();
    for t in tasks.iter().filter(|t| t.difficulty == Difficulty::Easy) {
        let spawn = tm.fine_near(t.start).unwrap();
        let sc = ScenarioConfig {
            agents: vec![AgentSpawn { embodiment: Embodiment::Humanoid, spawn_waypoint: spawn, yaw: None, vitals: None }],
            ..Default::default()
        };
        let (mut world, _) = World::reset(map, &sc).unwrap();
        let agent = *world.agents.keys().next().unwrap();
        let rec = run_nav_episode(&mut world, agent, t, &cfg).unwrap();
        let (s, d, red) = count_events(&world, agent, 0);
        assert_eq!((rec.collisions_static, rec.collisions_dynamic, rec.red_light), (s, d, red));
        assert!(rec.success, "task {} ended at {}", t.id, rec.d_t);
        assert!(rec.d_t <= 2.0 * cfg.goal_range);
        assert!(rec.decisions >= rec.fine_waypoints / 2);
        records.push(rec);
    }
    let m = compute_metrics(&records, MetricFamily::Navigation);
    assert_eq!(m.sr, Some(1.0));
    assert_eq!(m.dp.map(|v| v > 0.5), Some(true));
}

#[test]
fn search_episode_meets_and_reports_team_progress() {
    let (mut w, a, b) = two_robots(60.0);
    let rec = run_search_episode(&mut w, a, b, 3000, &TaskConfig::default()).unwrap();
    assert!(rec.success);
    assert!(rec.tp().unwrap() > 0.5);
    let m = compute_metrics(&[rec], MetricFamily::Search);
    assert_eq!(m.csr, Some(1.0));
}
