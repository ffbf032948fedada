mod common;

use common::oracles::{malformed_line, session, transcript};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use urbanworld::protocol::{parse_request, spawn_server, Session, MAX_PENDING};
use urbanworld::waypoints::WaypointId;

fn call(s: &mut Session, id: u64, cmd: &str, args: Value) -> Value {
    let line = json!({ "id": id, "cmd": cmd, "args": args }).to_string();
    let resp: Value = serde_json::from_str(&s.handle_line(&line)).unwrap();
    assert_eq!(resp["id"], id, "{resp}");
    resp
}

fn ok(s: &mut Session, id: u64, cmd: &str, args: Value) -> Value {
    let r = call(s, id, cmd, args);
    assert_eq!(r["status"], "ok", "{cmd}: {r}");
    r["data"].clone()
}

fn err_code(s: &mut Session, id: u64, cmd: &str, args: Value) -> String {
    let r = call(s, id, cmd, args);
    assert_eq!(r["status"], "error", "{cmd}: {r}");
    r["error"]["code"].as_str().unwrap().to_string()
}

#[test]
fn fuzzed_lines_never_crash_and_get_one_error_each() {
    let mut s = session();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut malformed = 0;
    for _ in 0..100_000 {
        let line = malformed_line(&mut rng);
        let out = s.handle_line(&line);
        assert!(!out.contains('\n'));
        let v: Value = serde_json::from_str(&out).unwrap();
        // A swapped byte can still leave a valid request; those answer normally.
        if parse_request(&line).is_err() {
            malformed += 1;
            assert_eq!(v["status"], "error");
            assert_eq!(v["error"]["code"], "malformed");
        }
    }
    assert!(malformed > 90_000);
    // The session still works.
    assert_eq!(ok(&mut s, 1, "world.info", json!({}))["tick"], 0);
}

#[test]
fn errors_echo_id_and_name_their_code() {
    let mut s = session();
    assert_eq!(err_code(&mut s, 5, "world.nope", json!({})), "unknown_command");
    assert_eq!(err_code(&mut s, 6, "agent.observe", json!({ "id": 42 })), "unknown_agent");
    assert_eq!(err_code(&mut s, 7, "sim.step", json!({ "n": "many" })), "bad_args");
    let r: Value = serde_json::from_str(&s.handle_line(r#"{"id":9}"#)).unwrap();
    assert_eq!((r["id"].as_u64(), r["error"]["code"].as_str()), (Some(9), Some("malformed")));
    let r: Value = serde_json::from_str(&s.handle_line("{not json")).unwrap();
    assert_eq!(r["id"], 0);
    let mut empty = Session::empty();
    assert_eq!(err_code(&mut empty, 1, "world.info", json!({})), "no_world");
}

#[test]
fn info_register_observe_act_round_trip() {
    let mut s = session();
    let info = ok(&mut s, 1, "world.info", json!({}));
    assert_eq!(info["agent_count"], 0);
    assert_eq!(info["extent"]["max_x"], 320.0);
    let reg = ok(&mut s, 2, "agent.register", json!({ "embodiment": "humanoid" }));
    let id = reg["id"].as_u64().unwrap();
    assert_eq!(ok(&mut s, 3, "world.info", json!({}))["agent_count"], 1);
    let obs = ok(&mut s, 4, "agent.observe", json!({ "id": id }));
    assert_eq!(obs["agent_pose"], reg["pose"]);
    assert!(obs.get("local_raster").is_none());
    let with = ok(&mut s, 5, "agent.observe", json!({ "id": id, "raster": true }));
    let r = &with["local_raster"];
    let data = base64_decode(r["data_b64"].as_str().unwrap());
    assert_eq!(data.len() as u64, r["width"].as_u64().unwrap() * r["height"].as_u64().unwrap());
    let act = ok(&mut s, 6, "agent.act", json!({ "id": id, "action": "do_nothing" }));
    assert_eq!(act["feedback"]["outcome"], "ok");
    assert_eq!(act["tick"], 1);
    let act = ok(&mut s, 7, "agent.act", json!({ "id": id, "action": { "verb": "rotate", "theta": 0.5 } }));
    assert_eq!(act["feedback"]["verb"], "rotate");
    assert_eq!(err_code(&mut s, 8, "agent.act", json!({ "id": id, "action": { "verb": "rotate", "theta": 9.0 } })), "bad_action");
    assert_eq!(err_code(&mut s, 9, "agent.act", json!({ "id": id, "action": "fly" })), "bad_action");
}

fn base64_decode(s: &str) -> Vec<u8> {
    use base64::Engine as _;
    base64::engine::general_purpose::STANDARD.decode(s).unwrap()
}

#[test]
fn reset_keeps_registered_agents_and_ids() {
    let mut s = session();
    let a = ok(&mut s, 1, "agent.register", json!({ "embodiment": "humanoid" }));
    let b = ok(&mut s, 2, "agent.register", json!({ "embodiment": "robot" }));
    ok(&mut s, 3, "sim.step", json!({ "n": 5 }));
    let info = ok(&mut s, 4, "world.reset", json!({}));
    assert_eq!(info["tick"], 0);
    assert_eq!(info["agents"], json!([a["id"], b["id"]]));
    let obs = ok(&mut s, 5, "agent.observe", json!({ "id": a["id"] }));
    assert_eq!(obs["agent_pose"], a["pose"]);
}

#[test]
fn async_act_while_pending_is_busy() {
    let mut s = session();
    let id = ok(&mut s, 1, "agent.register", json!({ "embodiment": "humanoid" }))["id"].clone();
    ok(&mut s, 2, "sim.run", json!({ "mode": "async", "interval": 0.1 }));
    assert_eq!(ok(&mut s, 3, "agent.act", json!({ "id": id, "action": "step_forward" }))["accepted"], true);
    assert_eq!(err_code(&mut s, 4, "agent.act", json!({ "id": id, "action": "step_forward" })), "busy");
    ok(&mut s, 5, "sim.step", json!({ "n": 1 }));
    assert_eq!(ok(&mut s, 6, "agent.act", json!({ "id": id, "action": "step_forward" }))["accepted"], true);
    ok(&mut s, 7, "sim.run", json!({ "mode": "sync" }));
    assert_eq!(ok(&mut s, 8, "world.info", json!({}))["mode"], "sync");
}

#[test]
fn plan_nearest_chair_ends_seated() {
    let mut s = session();
    let id = ok(&mut s, 1, "agent.register", json!({ "embodiment": "humanoid" }))["id"].clone();
    let p = ok(&mut s, 2, "agent.plan", json!({ "id": id, "command": "go to the nearest chair and sit down" }));
    assert_eq!(p["program"]["status"], "running");
    let mut status = Value::Null;
    for k in 0..400 {
        ok(&mut s, 10 + k, "sim.step", json!({ "n": 10 }));
        status = ok(&mut s, 5000 + k, "task.status", json!({ "agent": id }))["program"].clone();
        if status["status"] != "running" {
            break;
        }
    }
    assert_eq!(status["status"], "done", "{status}");
    let obs = ok(&mut s, 3, "agent.observe", json!({ "id": id }));
    assert_eq!(obs["status_flags"]["seated"], true);
    // Acting by hand is refused only while a plan runs.
    ok(&mut s, 4, "agent.act", json!({ "id": id, "action": "stand_up" }));
    assert_eq!(err_code(&mut s, 5, "agent.plan", json!({ "id": id, "command": "juggle the moon" })), "unparseable_clause");
}

#[test]
fn structured_plan_matches_text() {
    let mut a = session();
    let mut b = session();
    for s in [&mut a, &mut b] {
        ok(s, 1, "agent.register", json!({ "embodiment": "humanoid" }));
    }
    let id = a.world().unwrap().agents.keys().next().copied().unwrap();
    let text = ok(&mut a, 2, "agent.plan", json!({ "id": id, "command": "go to the nearest bench" }));
    let structured = ok(&mut b, 2, "agent.plan", json!({ "id": id, "plan": text["plan"] }));
    assert_eq!(text["actions"], structured["actions"]);
    ok(&mut a, 3, "sim.step", json!({ "n": 200 }));
    ok(&mut b, 3, "sim.step", json!({ "n": 200 }));
    assert_eq!(a.world().unwrap().state_json(), b.world().unwrap().state_json());
}

#[test]
fn scene_edit_then_query() {
    let mut s = session();
    let museum = ok(&mut s, 1, "scene.query", json!({ "nearest": { "x": 160.0, "y": 160.0, "category": "building" } }));
    let e = &museum["entities"][0];
    let added = ok(
        &mut s,
        2,
        "scene.edit",
        json!({ "cmd": { "op": "add", "category": "urban_prop", "tags": ["kiosk"], "anchor": { "category": "building" }, "offset_distance": 3.0, "near": { "x": e["pose"]["x"], "y": e["pose"]["y"] } } }),
    );
    let new_id = added["id"].as_u64().unwrap();
    let q = ok(&mut s, 3, "scene.query", json!({ "id": new_id }));
    assert!(q["entities"][0]["tags"].as_array().unwrap().contains(&json!("kiosk")));
    ok(&mut s, 4, "scene.edit", json!({ "op": "remove", "id": new_id }));
    assert_eq!(err_code(&mut s, 5, "scene.query", json!({ "id": new_id })), "not_found");
    let region = ok(&mut s, 6, "scene.query", json!({ "region": { "min_x": 0.0, "min_y": 0.0, "max_x": 320.0, "max_y": 320.0 } }));
    assert_eq!(region["entities"].as_array().unwrap().len(), s.world().unwrap().scene.len());
}

#[test]
fn delivery_task_exports_csv() {
    let mut s = session();
    for k in 0..4 {
        let spawn = free_spawn(&s, k as usize);
        ok(&mut s, k, "agent.register", json!({ "embodiment": "humanoid", "spawn": spawn }));
    }
    ok(&mut s, 10, "task.start", json!({ "kind": "delivery" }));
    ok(&mut s, 11, "sim.step", json!({ "n": 300 }));
    let st = ok(&mut s, 12, "task.status", json!({}));
    assert!(st["orders"].as_object().is_some_and(|o| !o.is_empty()), "{st}");
    let m = ok(&mut s, 13, "metrics.export", json!({ "kind": "delivery" }));
    let csv = m["csv"].as_str().unwrap();
    assert!(csv.starts_with("model,agent_id,profit,successful_orders,energy_efficiency,sharing_count,investment_count"));
    assert_eq!(csv.lines().count(), 1 + 4 + 2);
}

/// Spread-out free middle-lane sidewalk waypoints.
fn free_spawn(s: &Session, k: usize) -> WaypointId {
    let w = s.world().unwrap();
    let free: Vec<WaypointId> = w
        .waypoints
        .fine
        .nodes()
        .iter()
        .filter(|n| n.kind == urbanworld::waypoints::WaypointKind::FineSidewalk && n.lane_index == Some(1) && !w.static_blocked.contains(&n.id))
        .map(|n| n.id)
        .collect();
    free[k * free.len() / 7]
}

#[test]
fn nav_task_judged_from_wire_actions() {
    let mut s = session();
    let spawn = free_spawn(&s, 0);
    let id = ok(&mut s, 1, "agent.register", json!({ "embodiment": "humanoid", "spawn": spawn, "yaw": 0.0 }))["id"].clone();
    // The goal is the spawn waypoint itself, facing the current yaw.
    let t = ok(&mut s, 2, "task.start", json!({ "kind": "nav", "agent": id, "goal": spawn, "goal_yaw": 0.0, "time_limit": 100 }));
    let tid = t["task_id"].clone();
    ok(&mut s, 3, "agent.act", json!({ "id": id, "action": "evaluate" }));
    let st = ok(&mut s, 4, "task.status", json!({ "task_id": tid }));
    let rec = &st["tasks"][0]["record"];
    assert_eq!(rec["success"], true, "{st}");
    assert_eq!(rec["decisions"], 1);
    let m = ok(&mut s, 5, "metrics.export", json!({ "kind": "navigation" }));
    assert_eq!(m["report"]["sr"], 1.0);
    // A second task that times out.
    let goal = free_spawn(&s, 3);
    ok(&mut s, 6, "task.start", json!({ "kind": "nav", "agent": id, "goal": goal, "time_limit": 20 }));
    ok(&mut s, 7, "sim.step", json!({ "n": 25 }));
    let m = ok(&mut s, 8, "metrics.export", json!({ "kind": "navigation" }));
    assert_eq!(m["report"]["sr"], 0.5);
}

#[test]
fn golden_transcript_replays_identically() {
    let a = transcript();
    assert_eq!(a, transcript());
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/transcript.jsonl");
    let text = a.join("\n") + "\n";
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
    }
    let golden = std::fs::read_to_string(&path).expect("golden transcript exists; run with UPDATE_GOLDEN=1 to create");
    assert_eq!(text, golden);
}

fn read_responses(r: &mut BufReader<TcpStream>, n: usize) -> Vec<Value> {
    (0..n)
        .map(|_| {
            let mut line = String::new();
            r.read_line(&mut line).unwrap();
            serde_json::from_str(&line).unwrap()
        })
        .collect()
}

#[test]
fn every_request_answered_exactly_once_across_clients() {
    let addr = spawn_server("127.0.0.1:0", session()).unwrap();
    let handles: Vec<_> = (0..4u64)
        .map(|c| {
            std::thread::spawn(move || {
                let stream = TcpStream::connect(addr).unwrap();
                let mut w = stream.try_clone().unwrap();
                let mut r = BufReader::new(stream);
                let mut total = 0;
                let mut expected_ids = Vec::new();
                // Batches stay below the pending cap.
                for batch in 0..10u64 {
                    let mut out = String::new();
                    for k in 0..50u64 {
                        let id = 1 + c * 10_000 + batch * 100 + k;
                        if k % 7 == 3 {
                            out.push_str("{oops\n");
                            expected_ids.push(0);
                        } else {
                            out.push_str(&json!({ "id": id, "cmd": if k % 2 == 0 { "world.info" } else { "sim.step" } }).to_string());
                            out.push('\n');
                            expected_ids.push(id);
                        }
                    }
                    w.write_all(out.as_bytes()).unwrap();
                    let got = read_responses(&mut r, 50);
                    let got_ids: Vec<u64> = got.iter().map(|v| v["id"].as_u64().unwrap()).collect();
                    assert_eq!(got_ids, expected_ids[total..total + 50]);
                    total += 50;
                }
                total
            })
        })
        .collect();
    let n: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
    assert_eq!(n, 2000);
}

#[test]
fn pending_cap_answers_overloaded() {
    let addr = spawn_server("127.0.0.1:0", session()).unwrap();
    let stream = TcpStream::connect(addr).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut r = BufReader::new(stream);
    // One slow command, then a burst while it runs.
    let mut out = json!({ "id": 1, "cmd": "sim.step", "args": { "n": 20000 } }).to_string() + "\n";
    for id in 2..=200u64 {
        out += &(json!({ "id": id, "cmd": "world.info" }).to_string() + "\n");
    }
    w.write_all(out.as_bytes()).unwrap();
    let got = read_responses(&mut r, 200);
    let mut ids: Vec<u64> = got.iter().map(|v| v["id"].as_u64().unwrap()).collect();
    let overloaded = got.iter().filter(|v| v["error"]["code"] == "overloaded").count();
    assert!(overloaded >= 200 - MAX_PENDING - 10, "only {overloaded} refused");
    ids.sort();
    assert_eq!(ids, (1..=200).collect::<Vec<_>>());
}

#[test]
fn dropped_connection_keeps_agents() {
    let addr = spawn_server("127.0.0.1:0", session()).unwrap();
    {
        let mut c = TcpStream::connect(addr).unwrap();
        c.write_all(b"{\"id\":1,\"cmd\":\"agent.register\",\"args\":{\"embodiment\":\"humanoid\"}}\n").unwrap();
        let mut r = BufReader::new(c.try_clone().unwrap());
        assert_eq!(read_responses(&mut r, 1)[0]["status"], "ok");
    }
    let c = TcpStream::connect(addr).unwrap();
    let mut w = c.try_clone().unwrap();
    w.write_all(b"{\"id\":2,\"cmd\":\"world.info\"}\n").unwrap();
    let mut r = BufReader::new(c);
    assert_eq!(read_responses(&mut r, 1)[0]["data"]["agent_count"], 1);
}
