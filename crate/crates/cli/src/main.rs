use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use urbanworld::delivery::{DeliveryRun, EconomyConfig};
use urbanworld::env::{
    ActionBuffer, ActionCommand, AgentSpawn, Embodiment, Observation, Outcome, ScenarioConfig, StepMode, TrafficSpawn, Verb, World,
};
use urbanworld::procgen::{self, CityMap, GenConfig};
use urbanworld::protocol::{self, Session};
use urbanworld::tasks::{self, MetricFamily, TaskConfig, TaskMap};
use urbanworld::waypoints::{WaypointId, WaypointKind};
use urbanworld::{render, rng};

#[derive(Parser)]
#[command(name = "urbanworld", version, about = "Headless urban world simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a city map.
    Gen(GenArgs),
    /// Simulate a map with scripted wandering agents.
    Run(RunArgs),
    /// Run or generate a task suite.
    #[command(subcommand)]
    Task(TaskCommand),
    /// Serve the JSON-lines protocol over TCP.
    Serve(ServeArgs),
    /// Write a top-down PPM image of a map.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// City size in meters, as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    size: Option<(f64, f64)>,
    /// Road segments per square kilometer.
    #[arg(long)]
    road_density: Option<f64>,
    /// Place guaranteed-passable sidewalk obstacles.
    #[arg(long)]
    obstacle_mode: bool,
    /// Full generator configuration as JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sync,
    Async,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long, value_enum, default_value = "sync")]
    mode: ModeArg,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scripted humanoid agents.
    #[arg(long, default_value_t = 1)]
    agents: usize,
    #[arg(long, default_value_t = 0)]
    vehicles: usize,
    #[arg(long, default_value_t = 0)]
    pedestrians: usize,
    /// Write the event log as JSON lines.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Write the final serialized state.
    #[arg(long)]
    state: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TaskCommand {
    /// Scripted greedy delivery agents; writes the metrics CSV.
    Delivery(DeliveryArgs),
    /// Generate a navigation suite and optionally run it with the built-in planner.
    Nav(NavArgs),
}

#[derive(Args)]
struct DeliveryArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long, default_value_t = 20)]
    agents: usize,
    #[arg(long, default_value_t = 5000)]
    steps: u64,
    /// Probability that an order appears in each window.
    #[arg(long, default_value_t = 0.9)]
    hunger: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Economy configuration as JSON; --hunger overrides its rate.
    #[arg(long)]
    economy: Option<PathBuf>,
    /// Label for the model column.
    #[arg(long, default_value = "scripted")]
    model: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NavArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, default_value_t = 10)]
    per_level: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run every task and write the navigation metrics CSV here.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Pedestrians spawned for dynamic tasks.
    #[arg(long, default_value_t = 20)]
    pedestrians: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long, default_value_t = protocol::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Scenario JSON; defaults to an empty sync scenario.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pixels per meter.
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
}

/// Bad input: exits with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(m: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(m.into()))
}

fn parse_size(s: &str) -> Result<(f64, f64), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: f64 = w.trim().parse().map_err(|e| format!("bad width: {e}"))?;
    let h: f64 = h.trim().parse().map_err(|e| format!("bad height: {e}"))?;
    Ok((w, h))
}

fn load_map(path: &Path) -> Result<CityMap> {
    CityMap::load(path).map_err(|e| config_err(e.to_string()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(a),
        Command::Task(TaskCommand::Delivery(a)) => delivery(a),
        Command::Task(TaskCommand::Nav(a)) => nav(a),
        Command::Serve(a) => serve(a),
        Command::Render(a) => render_cmd(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(s) = a.size {
        cfg.city_extent = s;
    }
    if let Some(d) = a.road_density {
        cfg.road_density = d;
    }
    cfg.obstacle_mode |= a.obstacle_mode;
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    let (map, report) = procgen::generate_city(&cfg).map_err(|e| match e {
        procgen::ProcgenError::ConfigInvalid(_) => config_err(e.to_string()),
        e => anyhow!(e),
    })?;
    write(&a.out, map.to_json())?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

/// Free middle-lane sidewalk waypoints spread evenly over the map.
fn spread_spawns(world: &World, n: usize) -> Result<Vec<WaypointId>> {
    let free: Vec<WaypointId> = world
        .waypoints
        .fine
        .nodes()
        .iter()
        .filter(|w| w.kind == WaypointKind::FineSidewalk && w.lane_index == Some(1) && !world.static_blocked.contains(&w.id))
        .map(|w| w.id)
        .collect();
    if free.len() < n.max(1) * 2 {
        return Err(config_err(format!("map has room for at most {} agents", free.len() / 2)));
    }
    let stride = free.len() / n.max(1);
    Ok((0..n).map(|i| free[i * stride]).collect())
}

/// Walk forward; turn a quarter left after a blocked step.
fn wander(id: u64, obs: Option<&Observation>) -> ActionCommand {
    let blocked = obs.and_then(|o| o.last_action_feedback.as_ref()).is_some_and(|f| f.outcome != Outcome::Ok);
    let verb = if blocked { Verb::Rotate { theta: std::f64::consts::FRAC_PI_2 } } else { Verb::StepForward };
    ActionCommand::new(id, verb)
}

fn run(a: RunArgs) -> Result<()> {
    let map = load_map(&a.map)?;
    let probe = ScenarioConfig { seed: a.seed, ..Default::default() };
    let (probe, _) = World::reset(&map, &probe).map_err(|e| config_err(e.to_string()))?;
    let agents = spread_spawns(&probe, a.agents)?
        .into_iter()
        .map(|w| AgentSpawn { embodiment: Embodiment::Humanoid, spawn_waypoint: w, yaw: None, vitals: None })
        .collect();
    let mode = match a.mode {
        ModeArg::Sync => StepMode::Sync,
        ModeArg::Async => StepMode::Async,
    };
    let scenario = ScenarioConfig {
        seed: a.seed,
        agents,
        traffic: TrafficSpawn { n_vehicles: a.vehicles, n_pedestrians: a.pedestrians },
        mode,
        ..Default::default()
    };
    let (mut world, mut obs) = World::reset(&map, &scenario).map_err(|e| config_err(e.to_string()))?;
    match mode {
        StepMode::Sync => {
            for _ in 0..a.steps {
                let cmds: Vec<ActionCommand> = world.agents.keys().map(|id| wander(*id, obs.get(id))).collect();
                obs = world.step_sync(&cmds)?.observations;
            }
        }
        StepMode::Async => {
            let buffer = ActionBuffer::new();
            let mut source = |_tick: u64, obs: &BTreeMap<u64, Observation>, buf: &ActionBuffer| {
                for (id, o) in obs {
                    if buf.is_available(*id) {
                        let _ = buf.submit(wander(*id, Some(o)));
                    }
                }
            };
            let duration = a.steps as f64 * world.config.dt;
            world.run_async(&mut source, &buffer, scenario.interval, duration)?;
        }
    }
    let state = world.state_json();
    if let Some(p) = &a.events {
        write(p, world.log.to_jsonl())?;
    }
    if let Some(p) = &a.state {
        write(p, &state)?;
    }
    let summary = serde_json::json!({
        "tick": world.tick,
        "agents": world.agents.len(),
        "events": world.log.events.len(),
        "state_fnv64": format!("{:016x}", fnv64(state.as_bytes())),
    });
    println!("{summary}");
    Ok(())
}

fn fnv64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn delivery(a: DeliveryArgs) -> Result<()> {
    let map = load_map(&a.map)?;
    let mut cfg: EconomyConfig = match &a.economy {
        Some(p) => read_json(p)?,
        None => EconomyConfig::default(),
    };
    cfg.hunger_rate = a.hunger;
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    if a.agents == 0 {
        return Err(config_err("need at least one agent"));
    }
    let mut run = DeliveryRun::new(&map, a.seed, a.agents, cfg).map_err(|e| config_err(e.to_string()))?;
    for _ in 0..a.steps {
        run.step();
    }
    let report = run.economy.report();
    write(&a.out, report.to_csv(&a.model))?;
    let mut states: BTreeMap<&str, usize> = BTreeMap::new();
    for o in run.economy.orders.values() {
        *states.entry(o.state.name()).or_default() += 1;
    }
    println!("{}", serde_json::json!({ "tick": run.world.tick, "orders": states }));
    Ok(())
}

fn nav(a: NavArgs) -> Result<()> {
    let map = load_map(&a.map)?;
    let cfg = TaskConfig::default();
    let tmap = TaskMap::new(&map).map_err(|e| config_err(e.to_string()))?;
    let mut r = rng::substream(a.seed, rng::streams::TASKS, 0);
    let suite = tasks::gen_physical_tasks(&tmap, a.per_level, &cfg, &mut r).map_err(|e| config_err(e.to_string()))?;
    write(&a.suite, serde_json::to_string_pretty(&suite)?)?;
    let Some(out) = &a.metrics else {
        println!("{}", serde_json::json!({ "tasks": suite.len() }));
        return Ok(());
    };
    let mut records = Vec::with_capacity(suite.len());
    for t in &suite {
        let start = tmap.fine_near(t.start).ok_or_else(|| anyhow!("task {} has no free start waypoint", t.id))?;
        let scenario = ScenarioConfig {
            seed: a.seed ^ t.id,
            agents: vec![AgentSpawn { embodiment: Embodiment::Humanoid, spawn_waypoint: start, yaw: None, vitals: None }],
            traffic: TrafficSpawn { n_vehicles: 0, n_pedestrians: if t.pedestrians { a.pedestrians } else { 0 } },
            ..Default::default()
        };
        let (mut world, _) = World::reset(&map, &scenario)?;
        let agent = *world.agents.keys().next().expect("one agent");
        records.push(tasks::run_nav_episode(&mut world, agent, t, &cfg)?);
    }
    let report = tasks::compute_metrics(&records, MetricFamily::Navigation);
    write(out, report.to_csv())?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let map = load_map(&a.map)?;
    let mut scenario: ScenarioConfig = match &a.scenario {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = a.seed {
        scenario.seed = s;
    }
    let session = Session::new(map, scenario).map_err(|e| config_err(e.message))?;
    let listener = std::net::TcpListener::bind((a.bind.as_str(), a.port)).with_context(|| format!("binding {}:{}", a.bind, a.port))?;
    eprintln!("listening on {}", listener.local_addr()?);
    protocol::serve(listener, session)?;
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let map = load_map(&a.map)?;
    let img = render::render_map(&map, a.scale).map_err(config_err)?;
    write(&a.out, img.to_ppm())
}
