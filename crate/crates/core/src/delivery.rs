//! Delivery economy: restaurants spawn orders, agents bid, pick up, deliver
//! and share them, while energy and money evolve under a per-agent ledger.

use crate::env::{ActionCommand, EventKind, Verb, World};
use crate::planner::{self, ExecStep, HighLevelPlan, PlanProgram, PlanStep, ProgramStatus, TargetSpec, Vocabulary};
use crate::rng;
use crate::waypoints::{path_length, Mode, WaypointId};
use crate::world_model::Category;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeliveryError {
    #[error("insufficient funds")]
    InsufficientFunds,
    #[error("wrong state: {0}")]
    WrongState(String),
    #[error("out of range")]
    OutOfRange,
    #[error("unknown order {0}")]
    UnknownOrder(u64),
    #[error("unknown agent {0}")]
    UnknownAgent(u64),
    #[error("invalid economy config: {0}")]
    ConfigInvalid(String),
    #[error("plan failed: {0}")]
    PlanFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AuctionMode {
    /// Lowest price wins outright.
    Lowest,
    /// Eligible bids win with probability proportional to
    /// exp(-(price - min) / temperature), temperature in cents.
    Softmax { temperature: f64 },
}

/// Economy parameters. Money is in integer cents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EconomyConfig {
    pub initial_money: i64,
    pub hunger_rate: f64,
    pub order_window: u64,
    pub scooter_price: i64,
    pub scooter_speed_multiplier: f64,
    pub drink_price: i64,
    pub drink_energy: f64,
    pub energy_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub default_speed: f64,
    /// f(v) = c0 + c1 v^2 energy per tick.
    pub energy_c0: f64,
    pub energy_c1: f64,
    pub late_penalty: i64,
    pub max_concurrent_orders: usize,
    /// base_reward = alpha + beta * path meters.
    pub reward_alpha: i64,
    pub reward_beta: f64,
    /// deadline = tick + gamma * distance / v_min, in ticks.
    pub deadline_gamma: f64,
    pub interaction_range: f64,
    pub handoff_range: f64,
    pub auction: AuctionMode,
}

impl Default for EconomyConfig {
    fn default() -> Self {
        Self {
            initial_money: 2000,
            hunger_rate: 0.5,
            order_window: 100,
            scooter_price: 3000,
            scooter_speed_multiplier: 2.0,
            drink_price: 200,
            drink_energy: 20.0,
            energy_max: 100.0,
            v_min: 1.0,
            v_max: 4.0,
            default_speed: 2.0,
            energy_c0: 0.01,
            energy_c1: 0.002,
            late_penalty: 100,
            max_concurrent_orders: 2,
            reward_alpha: 200,
            reward_beta: 5.0,
            deadline_gamma: 3.0,
            interaction_range: 1.5,
            handoff_range: 3.0,
            auction: AuctionMode::Lowest,
        }
    }
}

impl EconomyConfig {
    pub fn validate(&self) -> Result<(), DeliveryError> {
        let bad = |m: &str| Err(DeliveryError::ConfigInvalid(m.into()));
        if self.scooter_price < 0 || self.drink_price < 0 || self.late_penalty < 0 || self.initial_money < 0 {
            return bad("prices must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.hunger_rate) {
            return bad("hunger_rate must be in [0, 1]");
        }
        if !(self.v_min > 0.0 && self.v_min <= self.v_max) {
            return bad("need 0 < v_min <= v_max");
        }
        if !(self.v_min..=self.v_max).contains(&self.default_speed) {
            return bad("default_speed outside [v_min, v_max]");
        }
        if self.order_window == 0 || self.max_concurrent_orders == 0 {
            return bad("order_window and max_concurrent_orders must be positive");
        }
        if let AuctionMode::Softmax { temperature } = self.auction {
            if !(temperature > 0.0) {
                return bad("softmax temperature must be positive");
            }
        }
        Ok(())
    }

    pub fn energy_cost(&self, v: f64) -> f64 {
        self.energy_c0 + self.energy_c1 * v * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "agent")]
pub enum OrderState {
    Open,
    BidPhase,
    Assigned(u64),
    PickedUp,
    Delivered,
    Failed,
}

impl OrderState {
    pub fn name(self) -> &'static str {
        match self {
            OrderState::Open => "open",
            OrderState::BidPhase => "bid_phase",
            OrderState::Assigned(_) => "assigned",
            OrderState::PickedUp => "picked_up",
            OrderState::Delivered => "delivered",
            OrderState::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, OrderState::Delivered | OrderState::Failed)
    }
}

/// The documented order transitions, by state name.
pub fn valid_transition(from: &str, to: &str) -> bool {
    matches!(
        (from, to),
        ("new", "bid_phase")
            | ("open", "bid_phase")
            | ("bid_phase", "open")
            | ("bid_phase", "assigned")
            | ("assigned", "picked_up")
            | ("picked_up", "delivered")
    ) || (to == "failed" && !matches!(from, "delivered" | "failed"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub publisher: u64,
    pub meet_point: WaypointId,
    pub helper: Option<u64>,
    pub handed_off: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub id: u64,
    pub restaurant: u64,
    pub pickup: WaypointId,
    pub dropoff: WaypointId,
    pub base_reward: i64,
    pub deadline: u64,
    pub state: OrderState,
    pub winning_bid: Option<i64>,
    /// Winner of the auction, kept after pickup.
    pub assignee: Option<u64>,
    /// Who physically carries the order.
    pub holder: Option<u64>,
    pub shared: Option<Share>,
    pub bid_until: u64,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bid {
    pub agent: u64,
    pub price: i64,
    pub tick: u64,
}

/// Lowest price wins; ties go to the earliest bid, then the smallest agent
/// id. Agents at their concurrency cap are skipped.
pub fn resolve_auction(bids: &[Bid], load: impl Fn(u64) -> usize, cap: usize) -> Option<Bid> {
    let mut sorted = bids.to_vec();
    sorted.sort_by_key(|b| (b.price, b.tick, b.agent));
    sorted.into_iter().find(|b| load(b.agent) < cap)
}

/// Softmax acceptance over the eligible bids. Draws exactly one number.
pub fn resolve_auction_softmax(bids: &[Bid], load: impl Fn(u64) -> usize, cap: usize, temperature: f64, rng: &mut impl Rng) -> Option<Bid> {
    let mut eligible: Vec<Bid> = bids.iter().copied().filter(|b| load(b.agent) < cap).collect();
    eligible.sort_by_key(|b| (b.price, b.tick, b.agent));
    let min = eligible.first()?.price;
    let weights: Vec<f64> = eligible.iter().map(|b| (-((b.price - min) as f64) / temperature).exp()).collect();
    let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
    for (b, w) in eligible.iter().zip(&weights) {
        if u < *w {
            return Some(*b);
        }
        u -= w;
    }
    eligible.last().copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Delivery,
    Scooter,
    Drink,
}

/// One money movement. Revenue is positive, cost negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub tick: u64,
    pub kind: TxKind,
    pub amount: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentLedger {
    pub initial_money: i64,
    pub transactions: Vec<Transaction>,
    /// Energy spent each tick.
    pub energy_spent: Vec<f64>,
    pub o_bid: BTreeSet<u64>,
    pub o_succ: BTreeSet<u64>,
    pub o_delay: BTreeSet<u64>,
    pub o_shared_succ: BTreeSet<u64>,
    pub a_buy_bike_succ: BTreeSet<u64>,
}

impl AgentLedger {
    pub fn revenue(&self) -> i64 {
        self.transactions.iter().filter(|t| t.amount > 0).map(|t| t.amount).sum()
    }

    pub fn cost(&self) -> i64 {
        -self.transactions.iter().filter(|t| t.amount < 0).map(|t| t.amount).sum::<i64>()
    }

    pub fn total_energy(&self) -> f64 {
        self.energy_spent.iter().sum()
    }
}

/// High-level delivery verbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "snake_case")]
pub enum DeliveryAction {
    BidOrder {
        order: u64,
        price: i64,
    },
    PickUpOrder {
        order: u64,
    },
    DeliverOrder {
        order: u64,
    },
    ShareOrder {
        order: u64,
        meet_point: WaypointId,
    },
    CancelShare {
        order: u64,
    },
    /// Gives up an assigned or carried order; it fails with no refund.
    CancelOrder {
        order: u64,
    },
    GoToMeetPoint {
        order: u64,
    },
    PurchaseScooter,
    PurchaseDrinks,
    AdjustSpeed {
        v: f64,
    },
}

impl DeliveryAction {
    pub fn from_hook(verb: &str, args: &Map<String, Value>) -> Result<Self, DeliveryError> {
        let mut obj = args.clone();
        obj.insert("verb".into(), json!(verb));
        serde_json::from_value(Value::Object(obj)).map_err(|e| DeliveryError::WrongState(format!("bad {verb} arguments: {e}")))
    }

    fn to_step(&self) -> PlanStep {
        let v = serde_json::to_value(self).expect("action serializes");
        let Value::Object(mut m) = v else { unreachable!() };
        let verb = m.remove("verb").and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        PlanStep { verb, args: m }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Economy {
    pub config: EconomyConfig,
    pub orders: BTreeMap<u64, Order>,
    pub bids: BTreeMap<u64, Vec<Bid>>,
    pub ledgers: BTreeMap<u64, AgentLedger>,
    /// Restaurant entity -> pickup waypoint.
    pub restaurants: BTreeMap<u64, WaypointId>,
    /// Landmark entity -> dropoff waypoint.
    pub landmarks: BTreeMap<u64, WaypointId>,
    rng: ChaCha8Rng,
    auction_rng: ChaCha8Rng,
    next_order: u64,
    /// Pickup/dropoff path lengths, None when unreachable.
    #[serde(skip)]
    routes: BTreeMap<(WaypointId, WaypointId), Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub agent_id: u64,
    /// Profit in currency units.
    pub profit: f64,
    pub success_rate: Option<f64>,
    pub delay_rate: Option<f64>,
    pub energy_efficiency: Option<f64>,
    pub successful_orders: usize,
    pub sharing_count: usize,
    pub investment_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub agents: Vec<AgentMetrics>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v}"))
}

impl DeliveryReport {
    pub const CSV_HEADER: &'static str = "model,agent_id,profit,successful_orders,energy_efficiency,sharing_count,investment_count";

    /// Per-agent rows followed by population mean and standard deviation rows.
    pub fn to_csv(&self, model: &str) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for a in &self.agents {
            s.push_str(&format!(
                "{model},{},{},{},{},{},{}\n",
                a.agent_id,
                a.profit,
                a.successful_orders,
                fmt_opt(a.energy_efficiency),
                a.sharing_count,
                a.investment_count
            ));
        }
        let col = |f: &dyn Fn(&AgentMetrics) -> Option<f64>| -> Vec<f64> { self.agents.iter().filter_map(f).collect() };
        let cols = [
            col(&|a| Some(a.profit)),
            col(&|a| Some(a.successful_orders as f64)),
            col(&|a| a.energy_efficiency),
            col(&|a| Some(a.sharing_count as f64)),
            col(&|a| Some(a.investment_count as f64)),
        ];
        let stats: Vec<(f64, f64)> = cols.iter().map(|c| mean_std(c)).collect();
        let row = |label: &str, pick: fn(&(f64, f64)) -> f64| {
            let vals: Vec<String> = stats.iter().map(pick).map(|v| if v.is_nan() { String::new() } else { format!("{v}") }).collect();
            format!("{model},{label},{}\n", vals.join(","))
        };
        s.push_str(&row("avg", |s| s.0));
        s.push_str(&row("std", |s| s.1));
        s
    }
}

/// Metric report from ledgers; rates are undefined (None) on empty denominators.
pub fn compute_delivery_metrics(ledgers: &BTreeMap<u64, AgentLedger>) -> DeliveryReport {
    let agents = ledgers
        .iter()
        .map(|(&id, l)| {
            let profit = (l.revenue() - l.cost()) as f64 / 100.0;
            let e = l.total_energy();
            AgentMetrics {
                agent_id: id,
                profit,
                success_rate: (!l.o_bid.is_empty()).then(|| l.o_succ.len() as f64 / l.o_bid.len() as f64),
                delay_rate: (!l.o_succ.is_empty()).then(|| l.o_delay.len() as f64 / l.o_succ.len() as f64),
                energy_efficiency: (e > 0.0).then(|| profit / e),
                successful_orders: l.o_succ.len(),
                sharing_count: l.o_shared_succ.len(),
                investment_count: l.a_buy_bike_succ.len(),
            }
        })
        .collect();
    DeliveryReport { agents }
}

impl Economy {
    /// Finds restaurants and landmark drop-offs in the world's scene.
    pub fn new(config: EconomyConfig, seed: u64, world: &World) -> Result<Self, DeliveryError> {
        config.validate()?;
        let front = |fp: &crate::geometry::Aabb| {
            world.waypoints.fine.nearest_where(fp.center(), |w| w.kind.mode() == Mode::Pedestrian && !world.static_blocked.contains(&w.id))
        };
        let mut restaurants = BTreeMap::new();
        let mut landmarks = BTreeMap::new();
        for e in world.scene.entities().filter(|e| e.category == Category::Building) {
            let Some(w) = front(&e.footprint) else { continue };
            if e.has_tag("restaurant") {
                restaurants.insert(e.id.0, w);
            }
            if e.has_tag("landmark") {
                landmarks.insert(e.id.0, w);
            }
        }
        Ok(Self {
            config,
            orders: BTreeMap::new(),
            bids: BTreeMap::new(),
            ledgers: BTreeMap::new(),
            restaurants,
            landmarks,
            rng: rng::substream(seed, rng::streams::ORDERS, 0),
            auction_rng: rng::substream(seed, rng::streams::ORDERS, 1),
            next_order: 1,
            routes: BTreeMap::new(),
        })
    }

    /// Sets up an agent's ledger, vitals and walking speed.
    pub fn register(&mut self, world: &mut World, agent: u64) -> Result<(), DeliveryError> {
        let a = world.agents.get_mut(&agent).ok_or(DeliveryError::UnknownAgent(agent))?;
        a.vitals.money = self.config.initial_money;
        a.vitals.energy = self.config.energy_max;
        a.cruise = Some(self.config.default_speed);
        a.scooter_multiplier = 1.0;
        self.ledgers.insert(agent, AgentLedger { initial_money: self.config.initial_money, ..Default::default() });
        Ok(())
    }

    /// Orders an agent is responsible for.
    pub fn load(&self, agent: u64) -> usize {
        self.orders
            .values()
            .filter(|o| matches!(o.state, OrderState::Assigned(a) if a == agent) || (o.state == OrderState::PickedUp && o.holder == Some(agent)))
            .count()
    }

    fn transition(&mut self, world: &mut World, order: u64, to: OrderState, agent: u64) {
        let o = self.orders.get_mut(&order).expect("order exists");
        let from = o.state.name();
        o.state = to;
        world.log_event(agent, EventKind::OrderEvent, json!({"order": order, "from": from, "to": to.name()}));
    }

    /// One spawn window: each restaurant opens an order with probability
    /// `hunger_rate`. New orders go straight to bidding.
    pub fn spawn_orders(&mut self, world: &mut World, tick: u64) -> Vec<u64> {
        let mut out = Vec::new();
        if !tick.is_multiple_of(self.config.order_window) {
            return out;
        }
        let rests: Vec<(u64, WaypointId)> = self.restaurants.iter().map(|(k, v)| (*k, *v)).collect();
        for (rest, pickup) in rests {
            if !self.rng.random_bool(self.config.hunger_rate) {
                continue;
            }
            let drops: Vec<WaypointId> = self.landmarks.iter().filter(|(k, _)| **k != rest).map(|(_, v)| *v).filter(|w| *w != pickup).collect();
            if drops.is_empty() {
                continue;
            }
            let dropoff = drops[self.rng.random_range(0..drops.len())];
            let route = self.routes.entry((pickup, dropoff)).or_insert_with(|| {
                planner::nav_path(&world.waypoints.fine, &world.static_blocked, &BTreeSet::new(), pickup, dropoff)
                    .ok()
                    .map(|p| path_length(&world.waypoints.fine, &p))
            });
            let Some(distance) = *route else {
                continue;
            };
            let base_reward = self.config.reward_alpha + (self.config.reward_beta * distance).round() as i64;
            let secs = self.config.deadline_gamma * distance / self.config.v_min;
            let deadline = tick + (secs / world.config.dt).ceil() as u64;
            let id = self.next_order;
            self.next_order += 1;
            self.orders.insert(
                id,
                Order {
                    id,
                    restaurant: rest,
                    pickup,
                    dropoff,
                    base_reward,
                    deadline,
                    state: OrderState::BidPhase,
                    winning_bid: None,
                    assignee: None,
                    holder: None,
                    shared: None,
                    bid_until: tick + self.config.order_window,
                    distance,
                },
            );
            world.log_event(0, EventKind::OrderEvent, json!({"order": id, "from": "new", "to": "bid_phase"}));
            out.push(id);
        }
        out
    }

    fn ledger(&mut self, agent: u64) -> Result<&mut AgentLedger, DeliveryError> {
        self.ledgers.get_mut(&agent).ok_or(DeliveryError::UnknownAgent(agent))
    }

    fn near(&self, world: &World, agent: u64, w: WaypointId, range: f64) -> bool {
        world.agents[&agent].pose.position().dist(world.waypoints.fine.position(w)) <= range
    }

    fn order(&self, id: u64) -> Result<&Order, DeliveryError> {
        self.orders.get(&id).ok_or(DeliveryError::UnknownOrder(id))
    }

    /// Applies an economy primitive. Checks run before any mutation.
    pub fn apply(&mut self, world: &mut World, agent: u64, action: &DeliveryAction) -> Result<(), DeliveryError> {
        if !world.agents.contains_key(&agent) || !self.ledgers.contains_key(&agent) {
            return Err(DeliveryError::UnknownAgent(agent));
        }
        let tick = world.tick;
        let range = self.config.interaction_range;
        match *action {
            DeliveryAction::BidOrder { order, price } => {
                let o = self.order(order)?;
                if o.state != OrderState::BidPhase {
                    return Err(DeliveryError::WrongState(format!("order {order} is {}", o.state.name())));
                }
                if price <= 0 || price > o.base_reward {
                    return Err(DeliveryError::OutOfRange);
                }
                let bids = self.bids.entry(order).or_default();
                bids.retain(|b| b.agent != agent);
                bids.push(Bid { agent, price, tick });
            }
            DeliveryAction::PickUpOrder { order } => {
                let o = self.order(order)?;
                if o.state != OrderState::Assigned(agent) {
                    return Err(DeliveryError::WrongState(format!("order {order} is not assigned to {agent}")));
                }
                if world.agents[&agent].vitals.energy <= 0.0 {
                    return Err(DeliveryError::WrongState("no energy left".into()));
                }
                if !self.near(world, agent, o.pickup, range) {
                    return Err(DeliveryError::OutOfRange);
                }
                self.orders.get_mut(&order).unwrap().holder = Some(agent);
                self.transition(world, order, OrderState::PickedUp, agent);
                world.agents.get_mut(&agent).unwrap().inventory.orders.push(order);
            }
            DeliveryAction::DeliverOrder { order } => {
                let o = self.order(order)?.clone();
                if o.state != OrderState::PickedUp || o.holder != Some(agent) {
                    return Err(DeliveryError::WrongState(format!("agent {agent} does not carry order {order}")));
                }
                if !self.near(world, agent, o.dropoff, range) {
                    return Err(DeliveryError::OutOfRange);
                }
                let bid = o.winning_bid.expect("picked-up orders have a price");
                let late = tick > o.deadline;
                let revenue = if late { (bid - self.config.late_penalty).max(0) } else { bid };
                let publisher = o.assignee.expect("picked-up orders have an assignee");
                let mut payees = vec![(publisher, revenue)];
                if let Some(s) = o.shared.as_ref().filter(|s| s.handed_off) {
                    let helper = s.helper.expect("handoff implies helper");
                    let half = revenue / 2;
                    payees = vec![(publisher, half), (helper, revenue - half)];
                }
                for (who, amount) in &payees {
                    world.agents.get_mut(who).unwrap().vitals.money += amount;
                    let l = self.ledger(*who)?;
                    if *amount != 0 {
                        l.transactions.push(Transaction { tick, kind: TxKind::Delivery, amount: *amount });
                    }
                    if payees.len() == 2 {
                        l.o_shared_succ.insert(order);
                    }
                }
                let l = self.ledger(publisher)?;
                l.o_succ.insert(order);
                if late {
                    l.o_delay.insert(order);
                }
                self.transition(world, order, OrderState::Delivered, agent);
                world.agents.get_mut(&agent).unwrap().inventory.orders.retain(|x| *x != order);
            }
            DeliveryAction::ShareOrder { order, meet_point } => {
                let o = self.order(order)?;
                let mine = o.assignee == Some(agent) && matches!(o.state, OrderState::Assigned(_) | OrderState::PickedUp);
                if !mine || o.shared.is_some() {
                    return Err(DeliveryError::WrongState(format!("order {order} cannot be shared by {agent}")));
                }
                if !world.waypoints.fine.get(meet_point).is_some_and(|w| w.kind.mode() == Mode::Pedestrian) {
                    return Err(DeliveryError::WrongState(format!("bad meet point {meet_point}")));
                }
                self.orders.get_mut(&order).unwrap().shared = Some(Share { publisher: agent, meet_point, helper: None, handed_off: false });
                world.log_event(agent, EventKind::OrderEvent, json!({"order": order, "share": meet_point.0}));
            }
            DeliveryAction::CancelShare { order } => {
                let o = self.order(order)?;
                match &o.shared {
                    Some(s) if s.publisher == agent && !s.handed_off => {}
                    _ => return Err(DeliveryError::WrongState(format!("no cancellable share on order {order}"))),
                }
                self.orders.get_mut(&order).unwrap().shared = None;
                world.log_event(agent, EventKind::OrderEvent, json!({"order": order, "cancel_share": true}));
            }
            DeliveryAction::CancelOrder { order } => {
                let o = self.order(order)?;
                let owned = match o.state {
                    OrderState::Assigned(a) => a == agent,
                    OrderState::PickedUp => o.holder == Some(agent) && o.assignee == Some(agent),
                    _ => false,
                };
                if !owned {
                    return Err(DeliveryError::WrongState(format!("order {order} cannot be cancelled by {agent}")));
                }
                self.transition(world, order, OrderState::Failed, agent);
                world.agents.get_mut(&agent).unwrap().inventory.orders.retain(|x| *x != order);
            }
            DeliveryAction::GoToMeetPoint { order } => {
                let o = self.order(order)?;
                let Some(s) = &o.shared else {
                    return Err(DeliveryError::WrongState(format!("order {order} is not shared")));
                };
                if s.publisher == agent || s.helper.is_some_and(|h| h != agent) || o.state.is_terminal() {
                    return Err(DeliveryError::WrongState(format!("order {order} already has a helper")));
                }
                if !self.near(world, agent, s.meet_point, self.config.handoff_range) {
                    return Err(DeliveryError::OutOfRange);
                }
                self.orders.get_mut(&order).unwrap().shared.as_mut().unwrap().helper = Some(agent);
                world.log_event(agent, EventKind::OrderEvent, json!({"order": order, "helper": agent}));
            }
            DeliveryAction::PurchaseScooter => {
                let a = &world.agents[&agent];
                if a.inventory.scooter {
                    return Err(DeliveryError::WrongState("already owns a scooter".into()));
                }
                if a.vitals.money < self.config.scooter_price {
                    return Err(DeliveryError::InsufficientFunds);
                }
                let price = self.config.scooter_price;
                let a = world.agents.get_mut(&agent).unwrap();
                a.vitals.money -= price;
                a.inventory.scooter = true;
                a.scooter_multiplier = self.config.scooter_speed_multiplier;
                if !a.status_flags.seated && !a.status_flags.in_vehicle {
                    a.status_flags.riding_scooter = true;
                }
                let l = self.ledger(agent)?;
                l.transactions.push(Transaction { tick, kind: TxKind::Scooter, amount: -price });
                l.a_buy_bike_succ.insert(tick);
                world.log_event(agent, EventKind::Purchase, json!({"item": "scooter", "cost": price}));
            }
            DeliveryAction::PurchaseDrinks => {
                if world.agents[&agent].vitals.money < self.config.drink_price {
                    return Err(DeliveryError::InsufficientFunds);
                }
                let price = self.config.drink_price;
                let emax = self.config.energy_max;
                let gain = self.config.drink_energy;
                let a = world.agents.get_mut(&agent).unwrap();
                a.vitals.money -= price;
                a.vitals.energy = (a.vitals.energy + gain).min(emax);
                a.inventory.drinks += 1;
                self.ledger(agent)?.transactions.push(Transaction { tick, kind: TxKind::Drink, amount: -price });
                world.log_event(agent, EventKind::Purchase, json!({"item": "drink", "cost": price}));
            }
            DeliveryAction::AdjustSpeed { v } => {
                if !(self.config.v_min..=self.config.v_max).contains(&v) {
                    return Err(DeliveryError::OutOfRange);
                }
                world.agents.get_mut(&agent).unwrap().cruise = Some(v);
            }
        }
        Ok(())
    }

    /// Per-tick economy update, run after the world tick: energy use,
    /// handoffs, auctions and expiry at window boundaries, then new orders.
    pub fn step_economy(&mut self, world: &mut World) {
        let tick = world.tick;
        let ids: Vec<u64> = self.ledgers.keys().copied().collect();
        for id in &ids {
            let Some(a) = world.agents.get_mut(id) else { continue };
            let spent = self.config.energy_cost(a.speed).min(a.vitals.energy);
            a.vitals.energy -= spent;
            if a.vitals.energy <= 0.0 {
                a.vitals.energy = 0.0;
                a.cruise = Some(self.config.v_min);
            }
            self.ledgers.get_mut(id).unwrap().energy_spent.push(spent);
        }
        self.handoffs(world);
        if tick.is_multiple_of(self.config.order_window) {
            self.close_window(world, tick);
            self.spawn_orders(world, tick);
        }
    }

    fn handoffs(&mut self, world: &mut World) {
        let ready: Vec<(u64, u64, u64)> = self
            .orders
            .values()
            .filter(|o| o.state == OrderState::PickedUp)
            .filter_map(|o| {
                let s = o.shared.as_ref()?;
                let helper = s.helper?;
                let holder = o.holder?;
                (!s.handed_off
                    && holder == s.publisher
                    && self.near(world, holder, s.meet_point, self.config.handoff_range)
                    && self.near(world, helper, s.meet_point, self.config.handoff_range))
                .then_some((o.id, holder, helper))
            })
            .collect();
        for (order, from, to) in ready {
            let o = self.orders.get_mut(&order).unwrap();
            o.holder = Some(to);
            o.shared.as_mut().unwrap().handed_off = true;
            world.agents.get_mut(&from).unwrap().inventory.orders.retain(|x| *x != order);
            world.agents.get_mut(&to).unwrap().inventory.orders.push(order);
            world.log_event(from, EventKind::OrderEvent, json!({"order": order, "handoff": to}));
        }
    }

    fn close_window(&mut self, world: &mut World, tick: u64) {
        let ids: Vec<u64> = self.orders.keys().copied().collect();
        // Orders left unbid in the previous window go back to bidding.
        for &id in &ids {
            if self.orders[&id].state == OrderState::Open {
                self.orders.get_mut(&id).unwrap().bid_until = tick + self.config.order_window;
                self.transition(world, id, OrderState::BidPhase, 0);
            }
        }
        for &id in &ids {
            let o = &self.orders[&id];
            if o.state != OrderState::BidPhase || o.bid_until > tick {
                continue;
            }
            let bids = self.bids.remove(&id).unwrap_or_default();
            let cap = self.config.max_concurrent_orders;
            let winner = match self.config.auction {
                AuctionMode::Lowest => resolve_auction(&bids, |a| self.load(a), cap),
                AuctionMode::Softmax { temperature } => {
                    let mut r = self.auction_rng.clone();
                    let w = resolve_auction_softmax(&bids, |a| self.load(a), cap, temperature, &mut r);
                    self.auction_rng = r;
                    w
                }
            };
            match winner {
                Some(win) => {
                    let o = self.orders.get_mut(&id).unwrap();
                    o.winning_bid = Some(win.price);
                    o.assignee = Some(win.agent);
                    self.ledgers.get_mut(&win.agent).unwrap().o_bid.insert(id);
                    self.transition(world, id, OrderState::Assigned(win.agent), win.agent);
                }
                None => self.transition(world, id, OrderState::Open, 0),
            }
        }
        for &id in &ids {
            let o = &self.orders[&id];
            if matches!(o.state, OrderState::Open | OrderState::BidPhase) && tick > o.deadline {
                self.bids.remove(&id);
                self.transition(world, id, OrderState::Failed, 0);
            }
        }
    }

    /// Compiles a delivery verb into navigation plus the economy primitive.
    pub fn compile(&self, action: &DeliveryAction) -> Result<HighLevelPlan, DeliveryError> {
        let nav = |w: WaypointId| PlanStep {
            verb: "navigate".into(),
            args: Map::from_iter([("target".to_string(), serde_json::to_value(TargetSpec::Waypoint { waypoint: w }).unwrap())]),
        };
        let mut steps = Vec::new();
        match action {
            DeliveryAction::PickUpOrder { order } => steps.push(nav(self.order(*order)?.pickup)),
            DeliveryAction::DeliverOrder { order } => steps.push(nav(self.order(*order)?.dropoff)),
            DeliveryAction::GoToMeetPoint { order } => {
                let s = self.order(*order)?.shared.as_ref().ok_or_else(|| DeliveryError::WrongState("not shared".into()))?;
                steps.push(nav(s.meet_point));
            }
            _ => {}
        }
        steps.push(action.to_step());
        Ok(HighLevelPlan { steps, source_text: String::new() })
    }

    /// Drives one agent through a delivery verb while every other agent
    /// idles and the economy ticks along. Returns the ticks used.
    pub fn perform(&mut self, world: &mut World, agent: u64, action: &DeliveryAction, max_ticks: usize) -> Result<usize, DeliveryError> {
        let plan = self.compile(action)?;
        let mut prog =
            planner::expand_rule_based(&plan, world, agent, &Vocabulary::default()).map_err(|e| DeliveryError::PlanFailed(e.to_string()))?;
        for t in 0..=max_ticks {
            let cmd = loop {
                match planner::tick_executor(&mut prog, world) {
                    ExecStep::Hook { verb, args } => self.apply(world, agent, &DeliveryAction::from_hook(&verb, &args)?)?,
                    ExecStep::Primitive(c) => break c,
                    ExecStep::Idle => match &prog.status {
                        ProgramStatus::Done => return Ok(t),
                        ProgramStatus::Failed(r) => return Err(DeliveryError::PlanFailed(r.clone())),
                        ProgramStatus::Running => break ActionCommand::new(agent, Verb::DoNothing),
                    },
                }
            };
            if t == max_ticks {
                break;
            }
            let cmds = world.fill_idle(&[cmd]);
            world.step_sync(&cmds).map_err(|e| DeliveryError::PlanFailed(e.to_string()))?;
            self.step_economy(world);
        }
        Err(DeliveryError::PlanFailed("timeout".into()))
    }

    pub fn report(&self) -> DeliveryReport {
        compute_delivery_metrics(&self.ledgers)
    }
}

#[derive(Debug, Clone, Serialize)]
struct AgentMind {
    program: Option<PlanProgram>,
    /// Fraction of the base reward this agent bids.
    discount: f64,
    sharer: bool,
    waiting_since: Option<u64>,
    /// Orders this agent already tried to share; each is offered once.
    offered: BTreeSet<u64>,
    /// After a failed program the agent waits a random few ticks, which
    /// breaks symmetric face-offs.
    backoff_until: u64,
}

/// A population of rule-following delivery agents driven through the planner.
#[derive(Debug, Clone)]
pub struct GreedyFleet {
    minds: BTreeMap<u64, AgentMind>,
    rng: ChaCha8Rng,
    vocab: Vocabulary,
    /// Ticks a sharer waits at its meet point before cancelling.
    pub share_patience: u64,
}

impl GreedyFleet {
    pub fn new(seed: u64, agents: &[u64]) -> Self {
        let mut rng = rng::substream(seed, rng::streams::AGENTS, 0);
        let minds = agents
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let discount = rng.random_range(0.6..1.0);
                (id, AgentMind { program: None, discount, sharer: i % 4 == 3, waiting_since: None, offered: BTreeSet::new(), backoff_until: 0 })
            })
            .collect();
        Self { minds, rng, vocab: Vocabulary::default(), share_patience: 400 }
    }

    fn decide(&mut self, id: u64, econ: &Economy, world: &World) -> Option<DeliveryAction> {
        let me = &world.agents[&id];
        let pos = me.pose.position();
        let g = &world.waypoints.fine;
        let mind = self.minds.get_mut(&id).unwrap();
        let carried: Vec<&Order> = econ.orders.values().filter(|o| o.state == OrderState::PickedUp && o.holder == Some(id)).collect();
        if let Some(o) = carried.iter().find(|o| o.shared.as_ref().is_some_and(|s| !s.handed_off && s.publisher == id)) {
            let s = o.shared.as_ref().unwrap();
            let since = *mind.waiting_since.get_or_insert(world.tick);
            if world.tick - since > self.share_patience && s.helper.is_none() {
                mind.waiting_since = None;
                return Some(DeliveryAction::CancelShare { order: o.id });
            }
            return None;
        }
        mind.waiting_since = None;
        if let Some(o) = carried.iter().min_by(|a, b| {
            let da = g.position(a.dropoff).dist(pos);
            let db = g.position(b.dropoff).dist(pos);
            da.total_cmp(&db).then(a.id.cmp(&b.id))
        }) {
            let far = g.position(o.dropoff).dist(pos) > 120.0;
            if mind.sharer && far && o.shared.is_none() && o.assignee == Some(id) && mind.offered.insert(o.id) {
                let meet = g.nearest(pos, Mode::Pedestrian)?;
                return Some(DeliveryAction::ShareOrder { order: o.id, meet_point: meet });
            }
            return Some(DeliveryAction::DeliverOrder { order: o.id });
        }
        // Empty-handed agents answer nearby share requests before their own pickups.
        let help = econ
            .orders
            .values()
            .filter(|o| o.state == OrderState::PickedUp)
            .filter_map(|o| o.shared.as_ref().filter(|s| s.helper.is_none() && s.publisher != id).map(|s| (o, g.position(s.meet_point).dist(pos))))
            .filter(|(_, d)| *d <= 150.0)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)));
        if let Some((o, _)) = help {
            return Some(DeliveryAction::GoToMeetPoint { order: o.id });
        }
        if let Some(o) = econ.orders.values().find(|o| o.state == OrderState::Assigned(id)) {
            if me.vitals.energy > 0.0 {
                return Some(DeliveryAction::PickUpOrder { order: o.id });
            }
        }
        if me.vitals.energy < 25.0 && me.vitals.money >= econ.config.drink_price {
            return Some(DeliveryAction::PurchaseDrinks);
        }
        if !me.inventory.scooter && me.vitals.money >= econ.config.scooter_price + econ.config.initial_money {
            return Some(DeliveryAction::PurchaseScooter);
        }
        let room = econ.config.max_concurrent_orders.saturating_sub(econ.load(id));
        if room > 0 {
            let mut open: Vec<&Order> = econ
                .orders
                .values()
                .filter(|o| o.state == OrderState::BidPhase && !econ.bids.get(&o.id).is_some_and(|b| b.iter().any(|b| b.agent == id)))
                .collect();
            // Shortest whole trip first: reach the pickup, then carry.
            let trip = |o: &Order| g.position(o.pickup).dist(pos) + o.distance;
            open.sort_by(|a, b| trip(a).total_cmp(&trip(b)).then(a.id.cmp(&b.id)));
            if let Some(o) = open.first() {
                let jitter = self.rng.random_range(0.95..1.05);
                let price = ((o.base_reward as f64) * (mind.discount * jitter).min(1.0)).round().max(1.0) as i64;
                return Some(DeliveryAction::BidOrder { order: o.id, price });
            }
        }
        None
    }

    /// Chooses this tick's primitive for every agent, applying economy verbs
    /// as they come up.
    pub fn act(&mut self, econ: &mut Economy, world: &mut World) -> Vec<ActionCommand> {
        let ids: Vec<u64> = self.minds.keys().copied().collect();
        let mut out = Vec::new();
        for id in ids {
            let mut cmd = None;
            // A few decisions per tick at most; instant verbs do not use the tick.
            for _ in 0..4 {
                let running = self.minds[&id].program.as_ref().is_some_and(|p| !p.is_finished());
                if !running {
                    if world.tick < self.minds[&id].backoff_until {
                        break;
                    }
                    let Some(action) = self.decide(id, econ, world) else { break };
                    let prog = econ.compile(&action).ok().and_then(|plan| planner::expand_rule_based(&plan, world, id, &self.vocab).ok());
                    match prog {
                        Some(p) => self.minds.get_mut(&id).unwrap().program = Some(p),
                        None => {
                            // Unreachable target: try the verb in place.
                            let _ = econ.apply(world, id, &action);
                            continue;
                        }
                    }
                }
                let prog = self.minds.get_mut(&id).unwrap().program.as_mut().unwrap();
                match planner::tick_executor(prog, world) {
                    ExecStep::Primitive(c) => {
                        cmd = Some(c);
                        break;
                    }
                    ExecStep::Hook { verb, args } => {
                        if let Ok(a) = DeliveryAction::from_hook(&verb, &args) {
                            let _ = econ.apply(world, id, &a);
                        }
                    }
                    ExecStep::Idle => {
                        if matches!(prog.status, ProgramStatus::Failed(_)) {
                            let wait = self.rng.random_range(1..=20);
                            let mind = self.minds.get_mut(&id).unwrap();
                            mind.program = None;
                            mind.backoff_until = world.tick + wait;
                            break;
                        }
                    }
                }
            }
            out.push(cmd.unwrap_or(ActionCommand::new(id, Verb::DoNothing)));
        }
        out
    }
}

/// A complete scripted delivery run.
pub struct DeliveryRun {
    pub world: World,
    pub economy: Economy,
    pub fleet: GreedyFleet,
}

impl DeliveryRun {
    /// Registers `agents` humanoids on spread-out free sidewalk waypoints.
    pub fn new(map: &crate::procgen::CityMap, seed: u64, agents: usize, config: EconomyConfig) -> Result<Self, DeliveryError> {
        let err = |e: crate::env::EnvError| DeliveryError::ConfigInvalid(e.to_string());
        let (probe, _) = World::reset(map, &crate::env::ScenarioConfig { seed, ..Default::default() }).map_err(err)?;
        let free: Vec<WaypointId> = probe
            .waypoints
            .fine
            .nodes()
            .iter()
            .filter(|w| w.kind == crate::waypoints::WaypointKind::FineSidewalk && w.lane_index == Some(1))
            .filter(|w| !probe.static_blocked.contains(&w.id))
            .map(|w| w.id)
            .collect();
        if free.len() < agents * 2 {
            return Err(DeliveryError::ConfigInvalid("map too small for the fleet".into()));
        }
        let stride = free.len() / agents;
        let scenario = crate::env::ScenarioConfig {
            seed,
            agents: (0..agents)
                .map(|i| crate::env::AgentSpawn {
                    embodiment: crate::env::Embodiment::Humanoid,
                    spawn_waypoint: free[i * stride],
                    yaw: None,
                    vitals: None,
                })
                .collect(),
            ..Default::default()
        };
        let (mut world, _) = World::reset(map, &scenario).map_err(err)?;
        let mut economy = Economy::new(config, seed, &world)?;
        let ids: Vec<u64> = world.agents.keys().copied().collect();
        for &id in &ids {
            economy.register(&mut world, id)?;
        }
        economy.spawn_orders(&mut world, 0);
        Ok(Self { world, economy, fleet: GreedyFleet::new(seed, &ids) })
    }

    pub fn step(&mut self) {
        let cmds = self.fleet.act(&mut self.economy, &mut self.world);
        self.world.step_sync(&cmds).expect("fleet issues one valid action per agent");
        self.economy.step_economy(&mut self.world);
    }
}
