//! Discrete-event core: scenario configuration, the event loop, run
//! summaries and parameter sweeps.
//!
//! Events are ordered by `(time, insertion sequence)`. Mobility advances in
//! ticks of `dt`; positions are constant between ticks, and every tick closes
//! links whose endpoints drifted apart.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::cloud::{Cloud, CloudConfig};
use crate::ids::{ConnectionId, DeviceId, ManetId, NetConfig, TransferId};
use crate::linkmodel::{self, Channel, ConnectivityArgs, DataType, LinkError, RangeClass, RateTable};
use crate::metrics::{
    self, EntropyWeight, LogBase, MetricRow, MetricsError, SymbolDistribution, TransitionMatrix, TransmissionParams,
};
use crate::middleware::{
    LinkSettings, Middleware, MiddlewareConfig, ProtocolError, TransferOutcome, TransferRecord,
};
use crate::mobility::{self, Arena, MobilityParams, MobilityState, Noise, Position};
use crate::numerics::LogNormalParams;
use crate::rng::{self, StreamRng};
use crate::trace::Trace;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("scenario file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unknown sweep axis {0:?} (expected devices, epsilon_k, range or speed)")]
    UnknownAxis(String),
    #[error("sweep needs at least one value")]
    EmptySweep,
    #[error("sweep value {value} is not valid for axis {axis}")]
    BadSweepValue { axis: &'static str, value: f64 },
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("writing artifacts: {0}")]
    Artifacts(#[from] std::io::Error),
    #[error("writing artifacts: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArenaConfig {
    pub width: f64,
    pub height: f64,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        Self { width: 500.0, height: 500.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifetimeConfig {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for LifetimeConfig {
    fn default() -> Self {
        Self { mu: 60f64.ln(), sigma: 0.6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityConfig {
    pub sigma: f64,
    pub alpha: f64,
}

impl Default for ConnectivityConfig {
    fn default() -> Self {
        Self { sigma: 1.0, alpha: 10.0 }
    }
}

/// Mobility parameters as written in a scenario. Directions may be given in
/// degrees; `mean_direction_deg` wins over `mean_direction` when both are set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityConfig {
    pub lambda: f64,
    pub mean_speed: f64,
    pub mean_direction: f64,
    pub mean_direction_deg: Option<f64>,
    pub speed_sigma: f64,
    pub direction_sigma: f64,
    pub max_speed: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self::from(MobilityParams::default())
    }
}

impl From<MobilityParams> for MobilityConfig {
    fn from(p: MobilityParams) -> Self {
        Self {
            lambda: p.lambda,
            mean_speed: p.mean_speed,
            mean_direction: p.mean_direction,
            mean_direction_deg: None,
            speed_sigma: p.speed_sigma,
            direction_sigma: p.direction_sigma,
            max_speed: p.max_speed,
        }
    }
}

impl MobilityConfig {
    pub fn params(&self) -> MobilityParams {
        MobilityParams {
            lambda: self.lambda,
            mean_speed: self.mean_speed,
            mean_direction: self.mean_direction_deg.map(f64::to_radians).unwrap_or(self.mean_direction),
            speed_sigma: self.speed_sigma,
            direction_sigma: self.direction_sigma,
            max_speed: self.max_speed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceOverride {
    pub index: usize,
    pub position: Option<[f64; 2]>,
    pub uplink: Option<bool>,
    pub mobility: Option<MobilityConfig>,
    pub net_config: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DevicesConfig {
    pub count: usize,
    /// Devices `0..uplink_count` have an internet uplink.
    pub uplink_count: usize,
    pub uplink_mbps: f64,
    pub mobility: MobilityConfig,
    /// Network configuration token; an empty string means none.
    pub net_config: String,
    pub overrides: Vec<DeviceOverride>,
}

impl Default for DevicesConfig {
    fn default() -> Self {
        Self {
            count: 1,
            uplink_count: 1,
            uplink_mbps: 10.0,
            mobility: MobilityConfig::default(),
            net_config: "manet-0".into(),
            overrides: Vec::new(),
        }
    }
}

fn default_data_type() -> DataType {
    DataType::Text
}

fn default_connect_type() -> DataType {
    DataType::Video
}

/// A scenario action. Devices are referenced by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Register { device: usize },
    /// Logs in with the issued credential, or with `password` if given.
    Login { device: usize, password: Option<String> },
    StartManet { device: usize },
    LeaveManet { device: usize },
    Logout { device: usize },
    Discover {
        device: usize,
        #[serde(default = "default_channel")]
        channel: Channel,
    },
    /// Connects to `peer`, or to the best discovered peer when omitted.
    Connect {
        device: usize,
        peer: Option<usize>,
        #[serde(default = "default_connect_type")]
        data_type: DataType,
    },
    /// Sends over the active connection with `peer`; with `repeat` the send
    /// is reissued on every successful completion.
    Send {
        device: usize,
        peer: usize,
        #[serde(default = "default_data_type")]
        data_type: DataType,
        size_bits: f64,
        #[serde(default)]
        repeat: bool,
    },
    Blacklist { device: usize, peer: usize },
    SetUplink { device: usize, up: bool },
    OpenSession { device: usize },
    Relay {
        device: usize,
        dst_manet: String,
        #[serde(default = "default_data_type")]
        data_type: DataType,
        size_bits: f64,
    },
    /// Register, login and start the MANET for the listed devices (all when
    /// omitted).
    Bootstrap { devices: Option<Vec<usize>> },
    /// Every `interval` seconds each MANET device without a connection
    /// discovers and connects to its best peer, and each device sends one
    /// payload over every active connection it has.
    Exchange {
        interval: f64,
        #[serde(default = "default_data_type")]
        data_type: DataType,
        size_bits: f64,
    },
}

fn default_channel() -> Channel {
    Channel::WiFi
}

impl Action {
    fn devices(&self) -> Vec<usize> {
        match self {
            Action::Register { device }
            | Action::Login { device, .. }
            | Action::StartManet { device }
            | Action::LeaveManet { device }
            | Action::Logout { device }
            | Action::Discover { device, .. }
            | Action::SetUplink { device, .. }
            | Action::OpenSession { device }
            | Action::Relay { device, .. } => vec![*device],
            Action::Connect { device, peer, .. } => std::iter::once(*device).chain(*peer).collect(),
            Action::Send { device, peer, .. } | Action::Blacklist { device, peer } => vec![*device, *peer],
            Action::Bootstrap { devices } => devices.clone().unwrap_or_default(),
            Action::Exchange { .. } => Vec::new(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Action::Register { .. } => "register",
            Action::Login { .. } => "login",
            Action::StartManet { .. } => "start_manet",
            Action::LeaveManet { .. } => "leave_manet",
            Action::Logout { .. } => "logout",
            Action::Discover { .. } => "discover",
            Action::Connect { .. } => "connect",
            Action::Send { .. } => "send",
            Action::Blacklist { .. } => "blacklist",
            Action::SetUplink { .. } => "set_uplink",
            Action::OpenSession { .. } => "open_session",
            Action::Relay { .. } => "relay",
            Action::Bootstrap { .. } => "bootstrap",
            Action::Exchange { .. } => "exchange",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadItem {
    pub at: f64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Simulated seconds.
    pub duration: f64,
    /// Mobility tick, seconds.
    pub dt: f64,
    pub arena: ArenaConfig,
    pub range: RangeClass,
    pub epsilon_k: f64,
    pub overhead: f64,
    pub lifetime: LifetimeConfig,
    pub middleware: MiddlewareConfig,
    pub cloud: CloudConfig,
    pub connectivity: ConnectivityConfig,
    pub entropy_weight: EntropyWeight,
    /// Include device positions in every tick event.
    pub trace_positions: bool,
    pub devices: DevicesConfig,
    /// CSV file replacing the built-in rate table.
    pub rate_table: Option<PathBuf>,
    pub workload: Vec<WorkloadItem>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            seed: 0,
            duration: 300.0,
            dt: 1.0,
            arena: ArenaConfig::default(),
            range: RangeClass::M100,
            epsilon_k: 1.0,
            overhead: 0.0,
            lifetime: LifetimeConfig::default(),
            middleware: MiddlewareConfig::default(),
            cloud: CloudConfig::default(),
            connectivity: ConnectivityConfig::default(),
            entropy_weight: EntropyWeight::default(),
            trace_positions: false,
            devices: DevicesConfig::default(),
            rate_table: None,
            workload: Vec::new(),
        }
    }
}

fn positive(out: &mut Vec<String>, field: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        out.push(format!("{field} must be positive and finite, got {v}"));
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| EngineError::Io { path: path.into(), source })?;
        let mut config = Self::from_toml_str(&text)
            .map_err(|message| EngineError::Parse { path: path.into(), message })?;
        // relative rate-table paths are relative to the scenario file
        if let (Some(rt), Some(dir)) = (config.rate_table.as_mut(), path.parent()) {
            if rt.is_relative() {
                *rt = dir.join(&*rt);
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes to TOML")
    }

    /// Every violated constraint, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        positive(&mut out, "duration", self.duration);
        positive(&mut out, "dt", self.dt);
        positive(&mut out, "arena.width", self.arena.width);
        positive(&mut out, "arena.height", self.arena.height);
        if !(self.epsilon_k > 0.0 && self.epsilon_k <= 1.0) {
            out.push(format!("epsilon_k must lie in (0, 1], got {}", self.epsilon_k));
        }
        if !(0.0..=0.5).contains(&self.overhead) {
            out.push(format!("overhead must lie in [0, 0.5], got {}", self.overhead));
        }
        if let Err(e) = LogNormalParams::new(self.lifetime.mu, self.lifetime.sigma) {
            out.push(format!("lifetime: {e}"));
        }
        positive(&mut out, "connectivity.sigma", self.connectivity.sigma);
        positive(&mut out, "connectivity.alpha", self.connectivity.alpha);
        if let Err(e) = self.entropy_weight.value() {
            out.push(format!("entropy_weight: {e}"));
        }
        let mw = &self.middleware;
        for (field, v) in [("middleware.message_latency", mw.message_latency), ("middleware.accept_delay", mw.accept_delay)] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{field} must be non-negative, got {v}"));
            }
        }
        positive(&mut out, "middleware.confirm_timeout", mw.confirm_timeout);
        if let Some(b) = mw.beacon_interval {
            positive(&mut out, "middleware.beacon_interval", b);
        }
        if !(self.cloud.leg_latency >= 0.0 && self.cloud.leg_latency.is_finite()) {
            out.push(format!("cloud.leg_latency must be non-negative, got {}", self.cloud.leg_latency));
        }
        let d = &self.devices;
        if d.count == 0 {
            out.push("devices.count must be at least 1".into());
        }
        if d.uplink_count > d.count {
            out.push(format!("devices.uplink_count {} exceeds devices.count {}", d.uplink_count, d.count));
        }
        positive(&mut out, "devices.uplink_mbps", d.uplink_mbps);
        if let Err(e) = d.mobility.params().validate() {
            out.push(format!("devices.mobility: {e}"));
        }
        for o in &d.overrides {
            if o.index >= d.count {
                out.push(format!("override index {} out of range (count {})", o.index, d.count));
            }
            if let Some([x, y]) = o.position {
                if !(0.0..=self.arena.width).contains(&x) || !(0.0..=self.arena.height).contains(&y) {
                    out.push(format!("override {} position ({x}, {y}) outside the arena", o.index));
                }
            }
            if let Some(m) = &o.mobility {
                if let Err(e) = m.params().validate() {
                    out.push(format!("override {} mobility: {e}", o.index));
                }
            }
        }
        if let Some(path) = &self.rate_table {
            match RateTable::from_csv_path(path) {
                Ok(_) => {}
                Err(e) => out.push(format!("rate_table {}: {e}", path.display())),
            }
        }
        for (i, item) in self.workload.iter().enumerate() {
            if !(item.at >= 0.0 && item.at <= self.duration) {
                out.push(format!("workload[{i}] ({}) time {} outside [0, duration]", item.action.name(), item.at));
            }
            for dev in item.action.devices() {
                if dev >= d.count {
                    out.push(format!("workload[{i}] ({}) references device {dev} of {}", item.action.name(), d.count));
                }
            }
            match &item.action {
                Action::Send { size_bits, .. } | Action::Relay { size_bits, .. } => {
                    positive(&mut out, &format!("workload[{i}].size_bits"), *size_bits)
                }
                Action::Exchange { interval, size_bits, .. } => {
                    positive(&mut out, &format!("workload[{i}].interval"), *interval);
                    positive(&mut out, &format!("workload[{i}].size_bits"), *size_bits);
                }
                _ => {}
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(EngineError::Invalid(v))
        }
    }

    fn rates(&self) -> Result<RateTable, EngineError> {
        match &self.rate_table {
            Some(p) => Ok(RateTable::from_csv_path(p)?),
            None => Ok(RateTable::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum EventKind {
    Tick(u64),
    Beacon,
    Action(usize),
    Deliver(ConnectionId),
    Confirm(ConnectionId),
    TransferDone { transfer: TransferId, repeat: Option<usize> },
    RelayLeg(TransferId),
    Exchange(usize),
}

#[derive(Debug, Clone)]
struct Queued {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Per-device link state used by the entropy metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LinkState {
    Isolated = 0,
    InRange = 1,
    Connected = 2,
}

struct Mover {
    id: DeviceId,
    state: MobilityState,
    params: MobilityParams,
    rng: StreamRng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    pub devices: usize,
    pub epsilon_k: f64,
    pub range: RangeClass,
    /// Mbps per data type over the span from its first send to its last
    /// finished transfer.
    pub throughput_mbps: BTreeMap<DataType, f64>,
    pub delivered: u64,
    pub failed: u64,
    /// Delivered transfers, the information units of the transmission score.
    pub info_units: u64,
    pub transmission_score: f64,
    /// `P_k` over data types from their mean delivered payload size.
    pub info_probability: BTreeMap<DataType, f64>,
    pub chain_entropy_bits: f64,
    pub chain_entropy_trits: f64,
    pub symbol_entropy: f64,
    pub gateway_changes: u64,
    pub connectivity: f64,
    pub trace_digest: String,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Trace,
    pub digest: String,
    pub transfers: Vec<TransferRecord>,
    pub metrics: Vec<MetricRow>,
    pub summary: RunSummary,
}

impl RunResult {
    /// Writes `trace.jsonl`, `metrics.csv` and `summary.json` into `dir`.
    pub fn write_artifacts(&self, dir: impl AsRef<Path>) -> Result<(), EngineError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("trace.jsonl"), self.trace.to_jsonl())?;
        let file = fs::File::create(dir.join("metrics.csv"))?;
        metrics::write_metrics_csv(&self.metrics, file)?;
        fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&self.summary)?)?;
        Ok(())
    }
}

/// Per-type throughput from a transfer log. Each type is measured over the
/// span from its first send to its last finished transfer.
pub fn throughput_by_type(transfers: &[TransferRecord]) -> BTreeMap<DataType, f64> {
    DataType::ALL
        .iter()
        .map(|&dt| {
            let of_type: Vec<TransferRecord> = transfers
                .iter()
                .filter(|t| t.data_type == dt && t.outcome != TransferOutcome::InFlight)
                .cloned()
                .collect();
            let start = of_type.iter().map(|t| t.start).fold(f64::INFINITY, f64::min);
            let end = of_type.iter().filter_map(|t| t.end).fold(f64::NEG_INFINITY, f64::max);
            let mbps = if end > start {
                metrics::measure_throughput(&of_type, end - start).map(|m| m[&dt]).unwrap_or(0.0)
            } else {
                0.0
            };
            (dt, mbps)
        })
        .collect()
}

pub struct Engine {
    config: ScenarioConfig,
    arena: Arena,
    clock: f64,
    seq: u64,
    queue: BinaryHeap<Queued>,
    trace: Trace,
    mw: Middleware,
    movers: Vec<Mover>,
    ids: Vec<DeviceId>,
    /// Link-state transition counts, `[from][to]`.
    transitions: [[u64; 3]; 3],
    last_state: Vec<Option<LinkState>>,
    /// Occupancy counts for the symbol axes: x tercile, y tercile, link state.
    symbols: [[u64; 3]; 3],
}

impl Engine {
    pub fn new(config: ScenarioConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let arena = Arena::new(config.arena.width, config.arena.height).expect("validated arena");
        let lifetime = LogNormalParams::new(config.lifetime.mu, config.lifetime.sigma).expect("validated lifetime");
        let link = LinkSettings { range: config.range, rates: config.rates()?, overhead: config.overhead, lifetime };
        let cloud = Cloud::new(config.cloud, rng::stream(config.seed, "cloud", "credentials"));
        let mut mw = Middleware::new(config.middleware, link, cloud);
        let d = &config.devices;
        let mut movers = Vec::with_capacity(d.count);
        let mut ids = Vec::with_capacity(d.count);
        for i in 0..d.count {
            let id = DeviceId::indexed(i);
            let ov = d.overrides.iter().rev().find(|o| o.index == i);
            let params = ov.and_then(|o| o.mobility).unwrap_or(d.mobility).params();
            let mut placement = rng::stream(config.seed, id.as_str(), "placement");
            let position = match ov.and_then(|o| o.position) {
                Some([x, y]) => Position::new(x, y),
                None => Position::new(
                    placement.random::<f64>() * arena.width,
                    placement.random::<f64>() * arena.height,
                ),
            };
            let direction = placement.random::<f64>() * TAU;
            let uplink = ov.and_then(|o| o.uplink).unwrap_or(i < d.uplink_count);
            let net = ov.and_then(|o| o.net_config.clone()).unwrap_or_else(|| d.net_config.clone());
            let net = (!net.is_empty()).then_some(NetConfig(net));
            mw.add_device(id.clone(), position, net, uplink, d.uplink_mbps);
            movers.push(Mover {
                id: id.clone(),
                state: MobilityState { position, speed: params.mean_speed.min(params.max_speed), direction },
                params,
                rng: rng::stream(config.seed, id.as_str(), "mobility"),
            });
            ids.push(id);
        }
        let n = d.count;
        let mut engine = Self {
            arena,
            clock: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            trace: Trace::new(),
            mw,
            movers,
            ids,
            transitions: [[0; 3]; 3],
            last_state: vec![None; n],
            symbols: [[0; 3]; 3],
            config,
        };
        engine.schedule(0.0, EventKind::Tick(0));
        for i in 0..engine.config.workload.len() {
            let at = engine.config.workload[i].at;
            engine.schedule(at, EventKind::Action(i));
        }
        if let Some(b) = engine.config.middleware.beacon_interval {
            engine.schedule(b, EventKind::Beacon);
        }
        Ok(engine)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn middleware(&self) -> &Middleware {
        &self.mw
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Draws and discards `n` values from a device's mobility stream.
    pub fn consume_noise(&mut self, device: usize, n: usize) {
        let rng = &mut self.movers[device].rng;
        for _ in 0..n {
            let _: f64 = rng.sample(StandardNormal);
        }
    }

    fn schedule(&mut self, time: f64, kind: EventKind) {
        debug_assert!(time >= self.clock, "event scheduled in the past");
        self.queue.push(Queued { time, seq: self.seq, kind });
        self.seq += 1;
    }

    /// Runs to completion and summarises.
    pub fn run(mut self) -> Result<RunResult, EngineError> {
        while let Some(ev) = self.queue.pop() {
            if ev.time > self.config.duration {
                break;
            }
            self.clock = ev.time;
            self.handle(ev.kind);
        }
        self.finish()
    }

    /// Processes events up to and including `until`.
    pub fn run_until(&mut self, until: f64) {
        while self.queue.peek().is_some_and(|e| e.time <= until.min(self.config.duration)) {
            let ev = self.queue.pop().expect("peeked");
            self.clock = ev.time;
            self.handle(ev.kind);
        }
    }

    fn handle(&mut self, kind: EventKind) {
        let now = self.clock;
        match kind {
            EventKind::Tick(k) => self.tick(k),
            EventKind::Beacon => {
                for id in self.ids.clone() {
                    if self.mw.device(&id).is_some_and(|d| d.phase.in_manet()) {
                        let _ = self.mw.discover(&id, Channel::WiFi, now, &mut self.trace);
                    }
                }
                let b = self.config.middleware.beacon_interval.expect("beacon scheduled only when set");
                self.schedule(now + b, EventKind::Beacon);
            }
            EventKind::Action(i) => {
                let action = self.config.workload[i].action.clone();
                if let Err(e) = self.act(i, &action) {
                    self.fail_action(&action, &e);
                }
            }
            EventKind::Deliver(c) => match self.mw.deliver_request(c, now, &mut self.trace) {
                Ok(()) => self.schedule(now + self.config.middleware.accept_delay, EventKind::Confirm(c)),
                Err(e) => self.trace_error("deliver", &e),
            },
            EventKind::Confirm(c) => {
                if let Err(e) = self.mw.confirm(c, now, &mut self.trace) {
                    self.trace_error("confirm", &e);
                }
            }
            EventKind::TransferDone { transfer, repeat } => {
                let outcome = self.mw.complete_transfer(transfer, now, &mut self.trace);
                if let (Ok(Some(TransferOutcome::Delivered)), Some(i)) = (outcome, repeat) {
                    let action = self.config.workload[i].action.clone();
                    if let Err(e) = self.act(i, &action) {
                        self.fail_action(&action, &e);
                    }
                }
            }
            EventKind::RelayLeg(t) => {
                if self.mw.relay_second_leg(t, now, &mut self.trace).is_ok() {
                    let end = self.mw.transfer(t).expect("relay transfer exists").expected_end;
                    self.schedule(end, EventKind::TransferDone { transfer: t, repeat: None });
                }
            }
            EventKind::Exchange(i) => self.exchange(i),
        }
    }

    fn trace_error(&mut self, stage: &str, e: &ProtocolError) {
        self.trace.push(self.clock, "protocol_error", None, None, json!({ "stage": stage, "error": e.to_string() }));
    }

    fn fail_action(&mut self, action: &Action, e: &ProtocolError) {
        let dev = action.devices().first().map(|&i| self.ids[i].clone());
        self.trace.push(
            self.clock,
            "action_failed",
            dev.as_ref().map(|d| d as &dyn ToString),
            None,
            json!({ "action": action.name(), "error": e.to_string() }),
        );
    }

    fn tick(&mut self, k: u64) {
        let now = self.clock;
        if k > 0 {
            let dt = self.config.dt;
            for m in &mut self.movers {
                let noise = Noise { speed: m.rng.sample(StandardNormal), direction: m.rng.sample(StandardNormal) };
                let stepped = mobility::gm_step(m.state, &m.params, noise);
                m.state = mobility::integrate_position(stepped, dt, &self.arena);
            }
            for m in &self.movers {
                self.mw.set_position(&m.id, m.state.position).expect("mover ids are registered");
            }
            self.mw.check_links(now, &mut self.trace);
        }
        let detail = if self.config.trace_positions {
            json!({ "k": k, "positions": self.movers.iter().map(|m| [m.state.position.x, m.state.position.y]).collect::<Vec<_>>() })
        } else {
            json!({ "k": k })
        };
        self.trace.push(now, "tick", None, None, detail);
        self.observe_states();
        let next = (k + 1) as f64 * self.config.dt;
        if next <= self.config.duration {
            self.schedule(next, EventKind::Tick(k + 1));
        }
    }

    fn link_states(&self) -> Vec<LinkState> {
        let radius = self.config.range.radius();
        self.ids
            .iter()
            .map(|id| {
                let dev = self.mw.device(id).expect("known device");
                if !dev.phase.in_manet() {
                    return LinkState::Isolated;
                }
                if self.mw.active_connections().any(|c| c.involves(id)) {
                    return LinkState::Connected;
                }
                let near = self.mw.devices().any(|o| {
                    o.id != *id
                        && o.phase.in_manet()
                        && o.manet == dev.manet
                        && linkmodel::within_radius(o.position, dev.position, radius)
                });
                if near {
                    LinkState::InRange
                } else {
                    LinkState::Isolated
                }
            })
            .collect()
    }

    fn observe_states(&mut self) {
        let states = self.link_states();
        let tercile = |v: f64, extent: f64| (((v / extent) * 3.0).floor() as usize).min(2);
        for (i, s) in states.into_iter().enumerate() {
            if let Some(prev) = self.last_state[i] {
                self.transitions[prev as usize][s as usize] += 1;
            }
            self.last_state[i] = Some(s);
            let p = self.movers[i].state.position;
            self.symbols[0][tercile(p.x, self.arena.width)] += 1;
            self.symbols[1][tercile(p.y, self.arena.height)] += 1;
            self.symbols[2][s as usize] += 1;
        }
    }

    fn dev(&self, i: usize) -> DeviceId {
        self.ids[i].clone()
    }

    fn connect(&mut self, a: &DeviceId, b: &DeviceId) -> Result<ConnectionId, ProtocolError> {
        let c = self.mw.request_connection(a, b, self.clock, &mut self.trace)?;
        self.schedule(self.clock + self.config.middleware.message_latency, EventKind::Deliver(c));
        Ok(c)
    }

    fn act(&mut self, index: usize, action: &Action) -> Result<(), ProtocolError> {
        let now = self.clock;
        let tr = &mut self.trace;
        match action {
            Action::Register { device } => self.mw.register(&self.ids[*device], now, tr),
            Action::Login { device, password } => {
                let cred = password.clone().map(crate::ids::Credential);
                self.mw.login(&self.ids[*device], cred.as_ref(), now, tr).map(|_| ())
            }
            Action::StartManet { device } => self.mw.start_manet(&self.ids[*device], now, tr).map(|_| ()),
            Action::LeaveManet { device } => self.mw.leave_manet(&self.ids[*device], now, tr),
            Action::Logout { device } => self.mw.logout(&self.ids[*device], now, tr),
            Action::Discover { device, channel } => {
                self.mw.discover(&self.ids[*device], *channel, now, tr).map(|_| ())
            }
            Action::Connect { device, peer, data_type } => {
                let a = self.dev(*device);
                let b = match peer {
                    Some(p) => self.dev(*p),
                    None => self.mw.best_peer(&a, *data_type)?,
                };
                self.connect(&a, &b).map(|_| ())
            }
            Action::Send { device, peer, data_type, size_bits, repeat } => {
                let (a, b) = (self.ids[*device].clone(), self.ids[*peer].clone());
                let conn = self
                    .mw
                    .connection_between(&a, &b)
                    .ok_or_else(|| ProtocolError::NotConnected { a: a.clone(), b: b.clone() })?;
                let (t, end) = self.mw.send(conn, &a, *data_type, *size_bits, now, tr)?;
                let repeat = repeat.then_some(index);
                self.schedule(end, EventKind::TransferDone { transfer: t, repeat });
                Ok(())
            }
            Action::Blacklist { device, peer } => {
                let (a, b) = (self.ids[*device].clone(), self.ids[*peer].clone());
                self.mw.blacklist(&a, &b, now, tr)
            }
            Action::SetUplink { device, up } => self.mw.set_uplink(&self.ids[*device], *up, now, tr),
            Action::OpenSession { device } => self.mw.open_session(&self.ids[*device], now, tr).map(|_| ()),
            Action::Relay { device, dst_manet, data_type, size_bits } => {
                let (t, plan) =
                    self.mw.relay(&self.ids[*device], &ManetId::new(dst_manet.clone()), *data_type, *size_bits, now, tr)?;
                self.schedule(plan.first_leg_end(), EventKind::RelayLeg(t));
                Ok(())
            }
            Action::Bootstrap { devices } => {
                let list = devices.clone().unwrap_or_else(|| (0..self.ids.len()).collect());
                for i in list {
                    let id = self.dev(i);
                    let steps = self
                        .mw
                        .register(&id, now, &mut self.trace)
                        .and_then(|_| self.mw.login(&id, None, now, &mut self.trace))
                        .and_then(|_| self.mw.start_manet(&id, now, &mut self.trace));
                    if let Err(e) = steps {
                        self.fail_action(action, &e);
                    }
                }
                Ok(())
            }
            Action::Exchange { .. } => {
                self.exchange(index);
                Ok(())
            }
        }
    }

    fn exchange(&mut self, index: usize) {
        let Action::Exchange { interval, data_type, size_bits } = self.config.workload[index].action.clone() else {
            unreachable!("exchange events point at exchange actions");
        };
        let now = self.clock;
        for id in self.ids.clone() {
            if !self.mw.device(&id).is_some_and(|d| d.phase.in_manet()) {
                continue;
            }
            let busy = self.mw.connections().any(|c| c.involves(&id) && c.state != crate::middleware::ConnState::Closed);
            if !busy {
                let peer = self
                    .mw
                    .discover(&id, Channel::WiFi, now, &mut self.trace)
                    .map_err(|e| e.to_string())
                    .and_then(|_| self.mw.best_peer(&id, data_type).map_err(|e| e.to_string()));
                if let Ok(peer) = peer {
                    let _ = self.connect(&id, &peer);
                }
            }
            let conns: Vec<ConnectionId> =
                self.mw.active_connections().filter(|c| c.involves(&id)).map(|c| c.id).collect();
            for c in conns {
                if let Ok((t, end)) = self.mw.send(c, &id, data_type, size_bits, now, &mut self.trace) {
                    self.schedule(end, EventKind::TransferDone { transfer: t, repeat: None });
                }
            }
        }
        if now + interval <= self.config.duration {
            self.schedule(now + interval, EventKind::Exchange(index));
        }
    }

    fn finish(self) -> Result<RunResult, EngineError> {
        let transfers = self.mw.transfers();
        let cfg = &self.config;
        let throughput = throughput_by_type(&transfers);
        let delivered = transfers.iter().filter(|t| t.outcome == TransferOutcome::Delivered).count() as u64;
        let failed = transfers.iter().filter(|t| t.outcome == TransferOutcome::Failed).count() as u64;
        let n = cfg.devices.count as u64;
        let transmission_score = if delivered == 0 {
            0.0
        } else {
            metrics::transmission_index(&TransmissionParams {
                epsilon_k: cfg.epsilon_k,
                n_devices: n,
                info_units: delivered,
                interval: (0.0, cfg.duration),
            })?
        };

        let mut sizes: BTreeMap<DataType, (f64, u64)> = BTreeMap::new();
        for t in transfers.iter().filter(|t| t.outcome == TransferOutcome::Delivered) {
            let e = sizes.entry(t.data_type).or_default();
            e.0 += t.size_bits;
            e.1 += 1;
        }
        let kinds: Vec<DataType> = sizes.keys().copied().collect();
        let means: Vec<f64> = sizes.values().map(|(s, c)| s / *c as f64).collect();
        let info_probability = if means.is_empty() {
            BTreeMap::new()
        } else {
            kinds.into_iter().zip(metrics::info_probability(&means)?).collect()
        };

        // Laplace smoothing keeps the chain irreducible on short runs
        let counts: Vec<Vec<u64>> = self.transitions.iter().map(|r| r.iter().map(|c| c + 1).collect()).collect();
        let chain = TransitionMatrix::from_counts(&counts)?;
        let pi = metrics::stationary_distribution(&chain)?;
        let chain_entropy_bits = metrics::chain_entropy(&chain, &pi, LogBase::Two)?;
        let chain_entropy_trits = metrics::chain_entropy(&chain, &pi, LogBase::Three)?;

        let axis = |c: &[u64; 3]| {
            let total: u64 = c.iter().sum();
            c.iter().map(|&v| v as f64 / total as f64).collect::<Vec<_>>()
        };
        let dist = SymbolDistribution::new(axis(&self.symbols[0]), axis(&self.symbols[1]), axis(&self.symbols[2]))?;
        let symbol_entropy = metrics::symbol_entropy(&dist, cfg.entropy_weight.value()?);

        let connectivity = linkmodel::connectivity_prob(ConnectivityArgs::new(
            n,
            cfg.connectivity.sigma,
            cfg.connectivity.alpha,
        )?);
        let digest = self.trace.digest();
        let summary = RunSummary {
            name: cfg.name.clone(),
            seed: cfg.seed,
            duration: cfg.duration,
            devices: cfg.devices.count,
            epsilon_k: cfg.epsilon_k,
            range: cfg.range,
            throughput_mbps: throughput,
            delivered,
            failed,
            info_units: delivered,
            transmission_score,
            info_probability,
            chain_entropy_bits,
            chain_entropy_trits,
            symbol_entropy,
            gateway_changes: self.mw.gateway_changes(),
            connectivity,
            trace_digest: digest.clone(),
        };
        let metrics = metric_rows(&summary);
        Ok(RunResult { trace: self.trace, digest, transfers, metrics, summary })
    }
}

/// The summary as `metric,scenario,epsilon_k,devices,value` rows.
pub fn metric_rows(s: &RunSummary) -> Vec<MetricRow> {
    let row = |metric: String, value: f64| MetricRow {
        metric,
        scenario: s.name.clone(),
        epsilon_k: s.epsilon_k,
        devices: s.devices as u64,
        value,
    };
    let mut rows: Vec<MetricRow> =
        s.throughput_mbps.iter().map(|(dt, v)| row(format!("throughput_{dt}_mbps"), *v)).collect();
    rows.extend([
        row("transmission_score".into(), s.transmission_score),
        row("delivered_transfers".into(), s.delivered as f64),
        row("failed_transfers".into(), s.failed as f64),
        row("chain_entropy_bits".into(), s.chain_entropy_bits),
        row("chain_entropy_trits".into(), s.chain_entropy_trits),
        row("symbol_entropy_trits".into(), s.symbol_entropy),
        row("gateway_changes".into(), s.gateway_changes as f64),
        row("connectivity_probability".into(), s.connectivity),
    ]);
    rows
}

pub fn run(config: ScenarioConfig) -> Result<RunResult, EngineError> {
    Engine::new(config)?.run()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Devices,
    EpsilonK,
    Range,
    Speed,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Devices => "devices",
            SweepAxis::EpsilonK => "epsilon_k",
            SweepAxis::Range => "range",
            SweepAxis::Speed => "speed",
        }
    }

    /// Copy of `config` with the axis set to `value`.
    pub fn apply(&self, config: &ScenarioConfig, value: f64) -> Result<ScenarioConfig, EngineError> {
        let bad = || EngineError::BadSweepValue { axis: self.as_str(), value };
        let mut c = config.clone();
        match self {
            SweepAxis::Devices => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(bad());
                }
                c.devices.count = value as usize;
                c.devices.uplink_count = c.devices.uplink_count.min(c.devices.count);
            }
            SweepAxis::EpsilonK => c.epsilon_k = value,
            SweepAxis::Range => {
                c.range = RangeClass::ALL.into_iter().find(|r| r.radius() == value).ok_or_else(bad)?;
            }
            SweepAxis::Speed => {
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(bad());
                }
                c.devices.mobility.mean_speed = value;
                c.devices.mobility.max_speed = c.devices.mobility.max_speed.max(2.0 * value);
            }
        }
        Ok(c)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "devices" => Ok(SweepAxis::Devices),
            "epsilon_k" | "epsilon" => Ok(SweepAxis::EpsilonK),
            "range" => Ok(SweepAxis::Range),
            "speed" => Ok(SweepAxis::Speed),
            other => Err(EngineError::UnknownAxis(other.to_string())),
        }
    }
}

/// The configs of a sweep, each with its own derived seed.
pub fn sweep_configs(config: &ScenarioConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<ScenarioConfig>, EngineError> {
    if values.is_empty() {
        return Err(EngineError::EmptySweep);
    }
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut c = axis.apply(config, v)?;
            c.seed = rng::derive_seed(config.seed, axis.as_str(), i);
            c.name = format!("{}/{}={}", config.name, axis.as_str(), v);
            Ok(c)
        })
        .collect()
}

/// Runs independent configs on `jobs` worker threads (0 = one per core),
/// returning results in input order.
pub fn run_all(configs: Vec<ScenarioConfig>, jobs: usize) -> Result<Vec<RunResult>, EngineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EngineError::Pool(e.to_string()))?;
    pool.install(|| configs.into_par_iter().map(run).collect())
}

pub fn sweep(config: &ScenarioConfig, axis: SweepAxis, values: &[f64], jobs: usize) -> Result<Vec<RunResult>, EngineError> {
    run_all(sweep_configs(config, axis, values)?, jobs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(distance: f64, range: RangeClass) -> ScenarioConfig {
        ScenarioConfig {
            name: "pair".into(),
            duration: 20.0,
            range,
            devices: DevicesConfig {
                count: 2,
                mobility: MobilityParams::stationary().into(),
                overrides: vec![
                    DeviceOverride { index: 0, position: Some([10.0, 10.0]), uplink: None, mobility: None, net_config: None },
                    DeviceOverride {
                        index: 1,
                        position: Some([10.0 + distance, 10.0]),
                        uplink: None,
                        mobility: None,
                        net_config: None,
                    },
                ],
                ..DevicesConfig::default()
            },
            workload: vec![
                WorkloadItem { at: 0.0, action: Action::Bootstrap { devices: None } },
                WorkloadItem { at: 1.0, action: Action::Discover { device: 0, channel: Channel::WiFi } },
                WorkloadItem { at: 1.0, action: Action::Connect { device: 0, peer: Some(1), data_type: DataType::Text } },
            ],
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn empty_workload_traces_only_ticks() {
        let config = ScenarioConfig { duration: 10.0, ..ScenarioConfig::default() };
        let r = run(config).unwrap();
        assert_eq!(r.trace.len(), 11);
        assert!(r.trace.records().iter().all(|e| e.event == "tick"));
        assert_eq!(r.summary.transmission_score, 0.0);
    }

    #[test]
    fn same_config_same_digest() {
        let mut c = pair(30.0, RangeClass::M50);
        c.devices.mobility = MobilityConfig::default();
        c.devices.overrides.clear();
        c.devices.count = 6;
        c.workload.push(WorkloadItem {
            at: 2.0,
            action: Action::Exchange { interval: 1.0, data_type: DataType::Image, size_bits: 1e6 },
        });
        let a = run(c.clone()).unwrap();
        let b = run(c.clone()).unwrap();
        assert_eq!(a.digest, b.digest);
        c.seed = 1;
        assert_ne!(run(c).unwrap().digest, a.digest);
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut c = pair(30.0, RangeClass::M50);
        c.duration = -1.0;
        c.devices.count = 0;
        c.epsilon_k = 2.0;
        let v = c.violations();
        assert!(v.len() >= 4, "{v:?}");
        assert!(matches!(run(c), Err(EngineError::Invalid(_))));
    }

    #[test]
    fn repeated_text_send_measures_calibrated_rate() {
        let mut c = pair(45.0, RangeClass::M50);
        c.workload.push(WorkloadItem {
            at: 2.0,
            action: Action::Send { device: 0, peer: 1, data_type: DataType::Text, size_bits: 5e6, repeat: true },
        });
        let r = run(c).unwrap();
        assert!((r.summary.throughput_mbps[&DataType::Text] - 10.0).abs() < 1e-9);
        assert_eq!(r.summary.throughput_mbps[&DataType::Video], 0.0);
        // from t=2 to t=20 at 0.5 s per transfer
        assert_eq!(r.summary.delivered, 36);
    }

    #[test]
    fn trace_times_never_go_backwards() {
        let mut c = pair(30.0, RangeClass::M50);
        c.devices.mobility = MobilityConfig { mean_speed: 5.0, ..MobilityConfig::default() };
        c.devices.overrides.clear();
        c.devices.count = 8;
        c.arena = ArenaConfig { width: 100.0, height: 100.0 };
        c.workload.push(WorkloadItem {
            at: 1.5,
            action: Action::Exchange { interval: 0.7, data_type: DataType::Voice, size_bits: 4e6 },
        });
        let r = run(c).unwrap();
        let times: Vec<f64> = r.trace.records().iter().map(|e| e.t).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sweep_cardinality_and_errors() {
        let c = pair(30.0, RangeClass::M50);
        assert_eq!(sweep(&c, SweepAxis::Devices, &[2.0, 3.0, 5.0], 2).unwrap().len(), 3);
        assert!(matches!(sweep(&c, SweepAxis::Devices, &[], 1), Err(EngineError::EmptySweep)));
        assert!(matches!("altitude".parse::<SweepAxis>(), Err(EngineError::UnknownAxis(_))));
        let seeds: Vec<u64> = sweep_configs(&c, SweepAxis::EpsilonK, &[0.1, 0.2]).unwrap().iter().map(|c| c.seed).collect();
        assert_ne!(seeds[0], seeds[1]);
    }

    #[test]
    fn scenario_toml_round_trip() {
        let c = pair(30.0, RangeClass::M100);
        let text = c.to_toml_string();
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn degrees_are_converted() {
        let m = MobilityConfig { mean_direction_deg: Some(90.0), ..MobilityConfig::default() };
        assert!((m.params().mean_direction - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }
}
