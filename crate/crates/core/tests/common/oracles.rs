//! Reference implementations the assertions compare against. Each one is
//! written the slow, obvious way.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use urbanworld::delivery::{Bid, Economy, OrderState};
use urbanworld::env::ScenarioConfig;
use urbanworld::geometry::Aabb;
use urbanworld::procgen::RoadNetwork;
use urbanworld::protocol::Session;
use urbanworld::tasks::TaskMap;
use urbanworld::waypoints::WaypointKind;

/// Session over the shared small city, seed 3.
pub fn session() -> Session {
    Session::new(super::small_city().clone(), ScenarioConfig { seed: 3, ..Default::default() }).unwrap()
}

/// Flood fill from intersection 0 across segment ends matched by position.
pub fn roads_connected(net: &RoadNetwork) -> bool {
    let Some(first) = net.intersections.first() else { return true };
    let mut seen = BTreeSet::from([first.id.0]);
    let mut stack = vec![first.position];
    while let Some(p) = stack.pop() {
        for s in &net.segments {
            let other = if s.a == p {
                s.b
            } else if s.b == p {
                s.a
            } else {
                continue;
            };
            let n = net.intersections.iter().find(|i| i.position == other).expect("segment end is an intersection");
            if seen.insert(n.id.0) {
                stack.push(other);
            }
        }
    }
    seen.len() == net.intersections.len()
}

/// Every pair of footprints, tested for positive-area overlap.
pub fn overlapping_pairs(boxes: &[(u64, Aabb)]) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    for (i, (a, fa)) in boxes.iter().enumerate() {
        for (b, fb) in &boxes[i + 1..] {
            let w = fa.max_x.min(fb.max_x) - fa.min_x.max(fb.min_x);
            let h = fa.max_y.min(fb.max_y) - fa.min_y.max(fb.min_y);
            if w > 1e-9 && h > 1e-9 {
                out.push((*a, *b));
            }
        }
    }
    out
}

/// Exhaustive scan: every eligible bid is compared against every other.
pub fn scan_oracle(bids: &[Bid], load: &BTreeMap<u64, usize>, cap: usize) -> Option<Bid> {
    let eligible: Vec<Bid> = bids.iter().copied().filter(|b| load.get(&b.agent).copied().unwrap_or(0) < cap).collect();
    eligible.iter().copied().find(|b| eligible.iter().all(|o| (b.price, b.tick, b.agent) <= (o.price, o.tick, o.agent)))
}

/// Replays the auctions of one window close against the scan oracle, in
/// order id order with loads updated as winners are assigned.
pub fn expected_winners(econ: &Economy, tick: u64) -> BTreeMap<u64, Option<u64>> {
    let mut load: BTreeMap<u64, usize> = econ.ledgers.keys().map(|&a| (a, econ.load(a))).collect();
    let mut out = BTreeMap::new();
    for o in econ.orders.values().filter(|o| o.state == OrderState::BidPhase && o.bid_until <= tick) {
        let bids = econ.bids.get(&o.id).cloned().unwrap_or_default();
        let win = scan_oracle(&bids, &load, econ.config.max_concurrent_orders);
        if let Some(w) = win {
            *load.get_mut(&w.agent).unwrap() += 1;
        }
        out.insert(o.id, win.map(|w| w.agent));
    }
    out
}

/// Independent recount: headings of hops that stay on one sidewalk lane,
/// and how often consecutive ones differ.
pub fn yaw_changes(map: &TaskMap, path: &[urbanworld::waypoints::WaypointId]) -> usize {
    let g = &map.waypoints.fine;
    let mut headings = Vec::new();
    for w in path.windows(2) {
        let (a, b) = (g.node(w[0]), g.node(w[1]));
        if a.kind != WaypointKind::FineSidewalk || b.kind != WaypointKind::FineSidewalk {
            continue;
        }
        if a.segment_id.is_none() || (a.segment_id, a.side, a.lane_index) != (b.segment_id, b.side, b.lane_index) {
            continue;
        }
        let d = b.position.sub(a.position);
        let h = if d.x.abs() > d.y.abs() { (d.x.signum() as i32, 0) } else { (0, d.y.signum() as i32) };
        headings.push(h);
    }
    headings.windows(2).filter(|p| p[0] != p[1]).count()
}

pub fn malformed_line(rng: &mut ChaCha8Rng) -> String {
    const VALID: &str = r#"{"id":7,"cmd":"world.info","args":{}}"#;
    match rng.random_range(0..6) {
        // Random bytes, lossily decoded the way the server does.
        0 => {
            let n = rng.random_range(1..80);
            let bytes: Vec<u8> = (0..n).map(|_| rng.random::<u8>()).filter(|b| *b != b'\n').collect();
            String::from_utf8_lossy(&bytes).into_owned()
        }
        // Truncated request.
        1 => VALID[..rng.random_range(1..VALID.len() - 1)].to_string(),
        // JSON that is not an object.
        2 => ["[]", "null", "42", "\"world.info\"", "[1,2,3]", "true"][rng.random_range(0..6)].to_string(),
        // Object without a usable id.
        3 => [r#"{"cmd":"world.info"}"#, r#"{"id":-1,"cmd":"world.info"}"#, r#"{"id":"7","cmd":"world.info"}"#, r#"{"id":1.5}"#]
            [rng.random_range(0..4)]
        .to_string(),
        // Printable noise.
        4 => (0..rng.random_range(1..40)).map(|_| rng.random_range(b' '..=b'~') as char).collect(),
        // A valid request with one byte swapped for a brace or quote.
        _ => {
            let mut b = VALID.as_bytes().to_vec();
            let i = rng.random_range(0..b.len());
            b[i] = b"{\"}:"[rng.random_range(0..4)];
            String::from_utf8(b).unwrap()
        }
    }
}

pub fn transcript() -> Vec<String> {
    let mut s = session();
    let script = [
        r#"{"id":1,"cmd":"world.info"}"#,
        r#"{"id":2,"cmd":"agent.register","args":{"embodiment":"humanoid"}}"#,
        r#"{"id":3,"cmd":"agent.register","args":{"embodiment":"robot"}}"#,
        r#"{"id":4,"cmd":"agent.observe","args":{"id":1000000}}"#,
        r#"{"id":5,"cmd":"agent.act","args":{"id":1000000,"action":"step_forward"}}"#,
        r#"{"id":6,"cmd":"agent.plan","args":{"id":1000001,"command":"go to the nearest bench"}}"#,
        r#"{"id":7,"cmd":"sim.step","args":{"n":50}}"#,
        r#"{"id":8,"cmd":"agent.observe","args":{"id":1000001}}"#,
        "garbage",
        r#"{"id":9,"cmd":"task.status"}"#,
        r#"{"id":10,"cmd":"world.reset"}"#,
        r#"{"id":11,"cmd":"agent.act","args":{"id":1000000,"action":{"verb":"rotate","theta":1.0}}}"#,
        r#"{"id":12,"cmd":"agent.observe","args":{"id":1000000,"raster":true}}"#,
    ];
    script.iter().map(|l| s.handle_line(l)).collect()
}
