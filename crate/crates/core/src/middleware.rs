//! Device-side protocol: registration, login, MANET start, discovery,
//! blacklisting, the request/confirm handshake and typed transfers.
//!
//! Every operation is an event handler called by the engine with the current
//! simulation time. Handlers never schedule anything themselves; they return
//! what the engine needs (ids, completion times) to queue follow-up events.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::cloud::{self, Cloud, CloudError, ConnectionCandidate, GatewayCandidate, RelayPlan, SessionGrant};
use crate::ids::{ConnectionId, Credential, DeviceId, ManetId, NetConfig, SessionToken, TransferId};
use crate::linkmodel::{
    self, duration_at_rate, Channel, DataType, LinkError, LinkLifetime, RangeClass, RateTable, BLUETOOTH_RATE_MBPS,
};
use crate::mobility::Position;
use crate::numerics::LogNormalParams;
use crate::trace::Trace;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("device {0} is not registered")]
    NotRegistered(DeviceId),
    #[error("authentication failed for {0}")]
    AuthFailure(DeviceId),
    #[error("{op} is not allowed for {device} in phase {phase:?}")]
    OrderViolation { device: DeviceId, phase: Phase, op: &'static str },
    #[error("device {0} has no network configuration")]
    ConfigMissing(DeviceId),
    #[error("device {0} cannot connect to or blacklist itself")]
    SelfConnect(DeviceId),
    #[error("{target} is not in the latest discovery result of {initiator}")]
    NotDiscovered { initiator: DeviceId, target: DeviceId },
    #[error("device {0} is not in an active MANET")]
    NotManetActive(DeviceId),
    #[error("connection between {a} and {b} refused by blacklist")]
    Refused { a: DeviceId, b: DeviceId },
    #[error("handshake {0} timed out")]
    HandshakeTimeout(ConnectionId),
    #[error("connection {0} is closed")]
    ConnectionClosed(ConnectionId),
    #[error("no connection {0}")]
    NoConnection(ConnectionId),
    #[error("no active connection between {a} and {b}")]
    NotConnected { a: DeviceId, b: DeviceId },
    #[error("{a} and {b} are already connected")]
    AlreadyConnected { a: DeviceId, b: DeviceId },
    #[error("{device} is not an endpoint of {connection}")]
    NotEndpoint { device: DeviceId, connection: ConnectionId },
    #[error("link of connection {0} is down")]
    LinkDown(ConnectionId),
    #[error("no transfer {0}")]
    UnknownTransfer(TransferId),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Link(#[from] LinkError),
}

/// Protocol phase; the derived order is the registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Installed,
    Registered,
    LoggedIn,
    ManetActive,
    Connected,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Installed => "Installed",
            Phase::Registered => "Registered",
            Phase::LoggedIn => "LoggedIn",
            Phase::ManetActive => "ManetActive",
            Phase::Connected => "Connected",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        [Phase::Installed, Phase::Registered, Phase::LoggedIn, Phase::ManetActive, Phase::Connected]
            .into_iter()
            .find(|p| p.as_str() == s)
    }

    pub fn in_manet(&self) -> bool {
        *self >= Phase::ManetActive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryResult {
    /// Peers sorted by distance, then id.
    pub neighbors: Vec<(DeviceId, f64)>,
    pub channel: Channel,
}

impl DiscoveryResult {
    pub fn contains(&self, id: &DeviceId) -> bool {
        self.neighbors.iter().any(|(n, _)| n == id)
    }
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: DeviceId,
    pub phase: Phase,
    pub position: Position,
    pub net_config: Option<NetConfig>,
    pub credential: Option<Credential>,
    pub token: Option<SessionToken>,
    pub manet: Option<ManetId>,
    pub blacklist: BTreeSet<DeviceId>,
    pub last_discovery: Option<DiscoveryResult>,
    pub uplink: bool,
    pub uplink_mbps: f64,
    /// Time the current uplink came up; its age feeds gateway election.
    pub uplink_since: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConnState {
    Requested,
    Confirmed,
    Active,
    Closed,
}

#[derive(Debug, Clone)]
pub struct Connection {
    pub id: ConnectionId,
    /// (initiator, target)
    pub endpoints: (DeviceId, DeviceId),
    pub channel: Channel,
    pub requested_at: f64,
    pub established_at: Option<f64>,
    pub state: ConnState,
    pub link: LinkLifetime,
}

impl Connection {
    pub fn involves(&self, d: &DeviceId) -> bool {
        &self.endpoints.0 == d || &self.endpoints.1 == d
    }

    pub fn peer_of(&self, d: &DeviceId) -> Option<&DeviceId> {
        if &self.endpoints.0 == d {
            Some(&self.endpoints.1)
        } else if &self.endpoints.1 == d {
            Some(&self.endpoints.0)
        } else {
            None
        }
    }

    /// Link lifetime as seen at `now`.
    pub fn link_at(&self, now: f64) -> LinkLifetime {
        let age = self.established_at.map(|t| (now - t).max(0.0)).unwrap_or(0.0);
        self.link.at_age(age).unwrap_or(self.link)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferOutcome {
    Delivered,
    Failed,
    InFlight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TransferRoute {
    Direct { connection: ConnectionId },
    Relay { src_manet: ManetId, dst_manet: ManetId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub id: TransferId,
    pub src: DeviceId,
    /// Receiving device; for relays, the destination gateway once known.
    pub dst: Option<DeviceId>,
    pub data_type: DataType,
    pub size_bits: f64,
    pub delivered_bits: f64,
    pub start: f64,
    pub expected_end: f64,
    pub end: Option<f64>,
    pub outcome: TransferOutcome,
    pub route: TransferRoute,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiddlewareConfig {
    /// One-way control message latency, seconds.
    pub message_latency: f64,
    /// Time the target takes to accept a delivered request, seconds.
    pub accept_delay: f64,
    /// Maximum time from request to confirmation, seconds.
    pub confirm_timeout: f64,
    /// Period of automatic Wi-Fi discovery; `None` disables beacons.
    pub beacon_interval: Option<f64>,
}

impl Default for MiddlewareConfig {
    fn default() -> Self {
        Self { message_latency: 0.005, accept_delay: 0.1, confirm_timeout: 2.0, beacon_interval: None }
    }
}

/// Radio and link parameters shared by every device.
#[derive(Debug, Clone)]
pub struct LinkSettings {
    pub range: RangeClass,
    pub rates: RateTable,
    pub overhead: f64,
    pub lifetime: LogNormalParams,
}

pub struct Middleware {
    config: MiddlewareConfig,
    link: LinkSettings,
    cloud: Cloud,
    devices: BTreeMap<DeviceId, DeviceState>,
    connections: BTreeMap<ConnectionId, Connection>,
    open_connections: BTreeSet<ConnectionId>,
    transfers: BTreeMap<TransferId, TransferRecord>,
    in_flight: BTreeSet<TransferId>,
    relays: BTreeMap<TransferId, RelayPlan>,
    next_connection: u64,
    next_transfer: u64,
    gateway_changes: u64,
}

impl Middleware {
    pub fn new(config: MiddlewareConfig, link: LinkSettings, cloud: Cloud) -> Self {
        Self {
            config,
            link,
            cloud,
            devices: BTreeMap::new(),
            connections: BTreeMap::new(),
            open_connections: BTreeSet::new(),
            transfers: BTreeMap::new(),
            in_flight: BTreeSet::new(),
            relays: BTreeMap::new(),
            next_connection: 0,
            next_transfer: 0,
            gateway_changes: 0,
        }
    }

    pub fn config(&self) -> &MiddlewareConfig {
        &self.config
    }

    pub fn link_settings(&self) -> &LinkSettings {
        &self.link
    }

    pub fn cloud(&self) -> &Cloud {
        &self.cloud
    }

    pub fn add_device(
        &mut self,
        id: DeviceId,
        position: Position,
        net_config: Option<NetConfig>,
        uplink: bool,
        uplink_mbps: f64,
    ) {
        let state = DeviceState {
            id: id.clone(),
            phase: Phase::Installed,
            position,
            net_config,
            credential: None,
            token: None,
            manet: None,
            blacklist: BTreeSet::new(),
            last_discovery: None,
            uplink,
            uplink_mbps,
            uplink_since: 0.0,
        };
        self.devices.insert(id, state);
    }

    pub fn device(&self, id: &DeviceId) -> Option<&DeviceState> {
        self.devices.get(id)
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceState> {
        self.devices.values()
    }

    fn dev(&self, id: &DeviceId) -> Result<&DeviceState, ProtocolError> {
        self.devices.get(id).ok_or_else(|| ProtocolError::UnknownDevice(id.clone()))
    }

    fn dev_mut(&mut self, id: &DeviceId) -> Result<&mut DeviceState, ProtocolError> {
        self.devices.get_mut(id).ok_or_else(|| ProtocolError::UnknownDevice(id.clone()))
    }

    pub fn set_position(&mut self, id: &DeviceId, position: Position) -> Result<(), ProtocolError> {
        self.dev_mut(id)?.position = position;
        Ok(())
    }

    pub fn position(&self, id: &DeviceId) -> Option<Position> {
        self.devices.get(id).map(|d| d.position)
    }

    pub fn connection(&self, id: ConnectionId) -> Option<&Connection> {
        self.connections.get(&id)
    }

    pub fn connections(&self) -> impl Iterator<Item = &Connection> {
        self.connections.values()
    }

    pub fn active_connections(&self) -> impl Iterator<Item = &Connection> {
        self.open().filter(|c| c.state == ConnState::Active)
    }

    /// Connections that are not yet closed.
    fn open(&self) -> impl Iterator<Item = &Connection> {
        self.open_connections.iter().map(|id| &self.connections[id])
    }

    pub fn connection_between(&self, a: &DeviceId, b: &DeviceId) -> Option<ConnectionId> {
        self.active_connections().find(|c| c.involves(a) && c.involves(b)).map(|c| c.id)
    }

    pub fn transfer(&self, id: TransferId) -> Option<&TransferRecord> {
        self.transfers.get(&id)
    }

    pub fn transfers(&self) -> Vec<TransferRecord> {
        self.transfers.values().cloned().collect()
    }

    pub fn gateway_changes(&self) -> u64 {
        self.gateway_changes
    }

    fn set_phase(&mut self, id: &DeviceId, to: Phase, now: f64, trace: &mut Trace) {
        let dev = self.devices.get_mut(id).expect("phase change on a known device");
        if dev.phase != to {
            let from = dev.phase;
            dev.phase = to;
            trace.push(now, "phase", Some(id), None, json!({ "from": from.as_str(), "to": to.as_str() }));
        }
    }

    fn require_phase(&self, id: &DeviceId, phase: Phase, op: &'static str) -> Result<(), ProtocolError> {
        let dev = self.dev(id)?;
        if dev.phase != phase {
            return Err(ProtocolError::OrderViolation { device: id.clone(), phase: dev.phase, op });
        }
        Ok(())
    }

    pub fn register(&mut self, id: &DeviceId, now: f64, trace: &mut Trace) -> Result<(), ProtocolError> {
        self.require_phase(id, Phase::Installed, "register")?;
        let credential = self.cloud.register(id, now, trace)?;
        self.dev_mut(id)?.credential = Some(credential);
        self.set_phase(id, Phase::Registered, now, trace);
        Ok(())
    }

    /// Logs in with `password`, or with the issued credential when `None`.
    pub fn login(
        &mut self,
        id: &DeviceId,
        password: Option<&Credential>,
        now: f64,
        trace: &mut Trace,
    ) -> Result<SessionToken, ProtocolError> {
        let dev = self.dev(id)?;
        if dev.phase == Phase::Installed {
            return Err(ProtocolError::NotRegistered(id.clone()));
        }
        self.require_phase(id, Phase::Registered, "login")?;
        let password = match password {
            Some(p) => p.clone(),
            None => dev.credential.clone().ok_or_else(|| ProtocolError::NotRegistered(id.clone()))?,
        };
        let token = self.cloud.login(id, &password, now, trace).map_err(|e| match e {
            CloudError::AuthFailure(_) => ProtocolError::AuthFailure(id.clone()),
            CloudError::NotRegistered(_) => ProtocolError::NotRegistered(id.clone()),
            other => ProtocolError::Cloud(other),
        })?;
        self.dev_mut(id)?.token = Some(token.clone());
        self.set_phase(id, Phase::LoggedIn, now, trace);
        Ok(token)
    }

    pub fn start_manet(&mut self, id: &DeviceId, now: f64, trace: &mut Trace) -> Result<ManetId, ProtocolError> {
        self.require_phase(id, Phase::LoggedIn, "start_manet")?;
        let manet = match &self.dev(id)?.net_config {
            Some(cfg) if !cfg.0.is_empty() => cfg.manet_id(),
            _ => return Err(ProtocolError::ConfigMissing(id.clone())),
        };
        self.dev_mut(id)?.manet = Some(manet.clone());
        self.set_phase(id, Phase::ManetActive, now, trace);
        trace.push(now, "manet_join", Some(id), None, json!({ "manet": manet, "members": self.members(&manet).len() }));
        self.reelect(&manet, now, trace);
        Ok(manet)
    }

    /// Leaves the MANET, closing every connection of the device.
    pub fn leave_manet(&mut self, id: &DeviceId, now: f64, trace: &mut Trace) -> Result<(), ProtocolError> {
        let dev = self.dev(id)?;
        if !dev.phase.in_manet() {
            return Err(ProtocolError::OrderViolation { device: id.clone(), phase: dev.phase, op: "leave_manet" });
        }
        let manet = dev.manet.clone().expect("MANET member has a MANET id");
        self.close_all_of(id, "peer_left_manet", now, trace);
        let dev = self.dev_mut(id)?;
        dev.manet = None;
        dev.last_discovery = None;
        self.set_phase(id, Phase::LoggedIn, now, trace);
        trace.push(now, "manet_leave", Some(id), None, json!({ "manet": manet }));
        self.reelect(&manet, now, trace);
        Ok(())
    }

    /// Ends the cloud session; a MANET member leaves its MANET first.
    pub fn logout(&mut self, id: &DeviceId, now: f64, trace: &mut Trace) -> Result<(), ProtocolError> {
        let phase = self.dev(id)?.phase;
        if phase < Phase::LoggedIn {
            return Err(ProtocolError::OrderViolation { device: id.clone(), phase, op: "logout" });
        }
        if phase.in_manet() {
            self.leave_manet(id, now, trace)?;
        }
        self.cloud.logout(id, now, trace);
        self.dev_mut(id)?.token = None;
        self.set_phase(id, Phase::Registered, now, trace);
        Ok(())
    }

    pub fn members(&self, manet: &ManetId) -> Vec<DeviceId> {
        self.devices
            .values()
            .filter(|d| d.phase.in_manet() && d.manet.as_ref() == Some(manet))
            .map(|d| d.id.clone())
            .collect()
    }

    pub fn manets(&self) -> BTreeSet<ManetId> {
        self.devices.values().filter(|d| d.phase.in_manet()).filter_map(|d| d.manet.clone()).collect()
    }

    fn uplink_remaining_life(&self, dev: &DeviceState, now: f64) -> f64 {
        let age = (now - dev.uplink_since).max(0.0);
        LinkLifetime::new(self.link.lifetime, age)
            .and_then(|l| linkmodel::remaining_life(&l))
            .unwrap_or(0.0)
    }

    fn reelect(&mut self, manet: &ManetId, now: f64, trace: &mut Trace) {
        let candidates: Vec<GatewayCandidate> = self
            .members(manet)
            .iter()
            .map(|id| {
                let dev = &self.devices[id];
                GatewayCandidate {
                    device: id.clone(),
                    uplink: dev.uplink,
                    remaining_life: self.uplink_remaining_life(dev, now),
                    uplink_mbps: dev.uplink_mbps,
                }
            })
            .collect();
        let status = cloud::elect_gateway(manet, &candidates);
        if self.cloud.set_gateway(status, now, trace) {
            self.gateway_changes += 1;
        }
    }

    pub fn set_uplink(&mut self, id: &DeviceId, uplink: bool, now: f64, trace: &mut Trace) -> Result<(), ProtocolError> {
        let dev = self.dev_mut(id)?;
        if dev.uplink == uplink {
            return Ok(());
        }
        dev.uplink = uplink;
        if uplink {
            dev.uplink_since = now;
        }
        let manet = dev.manet.clone().filter(|_| dev.phase.in_manet());
        trace.push(now, "uplink", Some(id), None, json!({ "up": uplink }));
        if let Some(m) = manet {
            self.reelect(&m, now, trace);
        }
        Ok(())
    }

    pub fn open_session(&mut self, id: &DeviceId, now: f64, trace: &mut Trace) -> Result<SessionGrant, ProtocolError> {
        let dev = self.dev(id)?;
        if !dev.phase.in_manet() {
            return Err(ProtocolError::NotManetActive(id.clone()));
        }
        let token = dev.token.clone().ok_or_else(|| ProtocolError::NotRegistered(id.clone()))?;
        let manet = dev.manet.clone().expect("MANET member has a MANET id");
        Ok(self.cloud.open_session(&token, &manet, now, trace)?)
    }

    /// Lists same-MANET peers within the channel radius, minus the blacklist.
    pub fn discover(
        &mut self,
        id: &DeviceId,
        channel: Channel,
        now: f64,
        trace: &mut Trace,
    ) -> Result<DiscoveryResult, ProtocolError> {
        let dev = self.dev(id)?;
        if !dev.phase.in_manet() {
            return Err(ProtocolError::NotManetActive(id.clone()));
        }
        let radius = channel.radius(self.link.range);
        let mut neighbors: Vec<(DeviceId, f64)> = self
            .devices
            .values()
            .filter(|o| o.id != *id && o.phase.in_manet() && o.manet == dev.manet && !dev.blacklist.contains(&o.id))
            .map(|o| (o.id.clone(), linkmodel::distance(dev.position, o.position)))
            .filter(|(_, d)| *d <= radius)
            .collect();
        neighbors.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let result = DiscoveryResult { neighbors, channel };
        trace.push(
            now,
            "discover",
            Some(id),
            None,
            json!({ "channel": channel, "found": result.neighbors.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>() }),
        );
        self.dev_mut(id)?.last_discovery = Some(result.clone());
        Ok(result)
    }

    /// Unilaterally blacklists `peer`, closing any connection between the two.
    pub fn blacklist(&mut self, id: &DeviceId, peer: &DeviceId, now: f64, trace: &mut Trace) -> Result<(), ProtocolError> {
        if id == peer {
            return Err(ProtocolError::SelfConnect(id.clone()));
        }
        self.dev(peer)?;
        let doomed: Vec<ConnectionId> = self
            .open()
            .filter(|c| c.involves(id) && c.involves(peer))
            .map(|c| c.id)
            .collect();
        for c in doomed {
            self.close_connection(c, "blacklisted", now, trace);
        }
        let dev = self.dev_mut(id)?;
        dev.blacklist.insert(peer.clone());
        if let Some(d) = dev.last_discovery.as_mut() {
            d.neighbors.retain(|(n, _)| n != peer);
        }
        trace.push(now, "blacklist", Some(id), Some(peer), json!({}));
        Ok(())
    }

    fn blacklisted_either(&self, a: &DeviceId, b: &DeviceId) -> bool {
        self.devices[a].blacklist.contains(b) || self.devices[b].blacklist.contains(a)
    }

    /// First half of the handshake: records a request from `initiator`.
    pub fn request_connection(
        &mut self,
        initiator: &DeviceId,
        target: &DeviceId,
        now: f64,
        trace: &mut Trace,
    ) -> Result<ConnectionId, ProtocolError> {
        if initiator == target {
            return Err(ProtocolError::SelfConnect(initiator.clone()));
        }
        let init = self.dev(initiator)?;
        let tgt = self.dev(target)?;
        if !init.phase.in_manet() {
            return Err(ProtocolError::NotManetActive(initiator.clone()));
        }
        if !tgt.phase.in_manet() || tgt.manet != init.manet {
            return Err(ProtocolError::NotManetActive(target.clone()));
        }
        if self.blacklisted_either(initiator, target) {
            return Err(ProtocolError::Refused { a: initiator.clone(), b: target.clone() });
        }
        let discovery = init.last_discovery.as_ref().filter(|d| d.contains(target)).ok_or_else(|| {
            ProtocolError::NotDiscovered { initiator: initiator.clone(), target: target.clone() }
        })?;
        let channel = discovery.channel;
        let busy = self.open().any(|c| c.involves(initiator) && c.involves(target));
        if busy {
            return Err(ProtocolError::AlreadyConnected { a: initiator.clone(), b: target.clone() });
        }
        let id = ConnectionId(self.next_connection);
        self.next_connection += 1;
        self.open_connections.insert(id);
        self.connections.insert(
            id,
            Connection {
                id,
                endpoints: (initiator.clone(), target.clone()),
                channel,
                requested_at: now,
                established_at: None,
                state: ConnState::Requested,
                link: LinkLifetime::fresh(self.link.lifetime),
            },
        );
        trace.push(now, "connect_request", Some(initiator), Some(target), json!({ "conn": id.to_string(), "channel": channel }));
        Ok(id)
    }

    fn pending(&self, id: ConnectionId) -> Result<&Connection, ProtocolError> {
        let c = self.connections.get(&id).ok_or(ProtocolError::NoConnection(id))?;
        if c.state != ConnState::Requested {
            return Err(ProtocolError::ConnectionClosed(id));
        }
        Ok(c)
    }

    /// The request reaches the target.
    pub fn deliver_request(&mut self, id: ConnectionId, now: f64, trace: &mut Trace) -> Result<(), ProtocolError> {
        let (a, b) = self.pending(id)?.endpoints.clone();
        if self.blacklisted_either(&a, &b) {
            self.close_connection(id, "refused", now, trace);
            return Err(ProtocolError::Refused { a, b });
        }
        trace.push(now, "connect_delivered", Some(&a), Some(&b), json!({ "conn": id.to_string() }));
        Ok(())
    }

    /// Second half of the handshake: the target confirms and the link goes
    /// Active, provided both ends are still in range.
    pub fn confirm(&mut self, id: ConnectionId, now: f64, trace: &mut Trace) -> Result<(), ProtocolError> {
        let conn = self.pending(id)?;
        let (a, b) = conn.endpoints.clone();
        let channel = conn.channel;
        let requested_at = conn.requested_at;
        if self.blacklisted_either(&a, &b) {
            self.close_connection(id, "refused", now, trace);
            return Err(ProtocolError::Refused { a, b });
        }
        let both_active = self.devices[&a].phase.in_manet() && self.devices[&b].phase.in_manet();
        let radius = channel.radius(self.link.range);
        let distance = linkmodel::distance(self.devices[&a].position, self.devices[&b].position);
        if !both_active || distance > radius || now - requested_at > self.config.confirm_timeout {
            self.close_connection(id, "handshake_timeout", now, trace);
            trace.push(now, "handshake_timeout", Some(&a), Some(&b), json!({ "conn": id.to_string(), "distance": distance }));
            return Err(ProtocolError::HandshakeTimeout(id));
        }
        let conn = self.connections.get_mut(&id).expect("pending connection exists");
        conn.state = ConnState::Confirmed;
        trace.push(now, "connect_confirmed", Some(&b), Some(&a), json!({ "conn": id.to_string() }));
        conn.state = ConnState::Active;
        conn.established_at = Some(now);
        trace.push(
            now,
            "connect_active",
            Some(&a),
            Some(&b),
            json!({ "conn": id.to_string(), "channel": channel, "distance": distance, "radius": radius }),
        );
        self.set_phase(&a, Phase::Connected, now, trace);
        self.set_phase(&b, Phase::Connected, now, trace);
        Ok(())
    }

    /// Picks the best discovered peer by expected link life times rate.
    pub fn best_peer(&self, id: &DeviceId, data_type: DataType) -> Result<DeviceId, ProtocolError> {
        let dev = self.dev(id)?;
        let discovery = dev.last_discovery.as_ref();
        let candidates: Vec<ConnectionCandidate> = discovery
            .map(|d| d.neighbors.as_slice())
            .unwrap_or(&[])
            .iter()
            .filter(|(peer, _)| self.connection_between(id, peer).is_none())
            .filter_map(|(peer, dist)| {
                let rate = self.rate_for(discovery?.channel, data_type, *dist).ok()?;
                let life = linkmodel::session_life(&LinkLifetime::fresh(self.link.lifetime)).ok()?;
                Some(ConnectionCandidate { peer: peer.clone(), expected_life: life, rate_mbps: rate })
            })
            .collect();
        Ok(cloud::select_best_connection(&candidates)?)
    }

    fn rate_for(&self, channel: Channel, data_type: DataType, distance: f64) -> Result<f64, ProtocolError> {
        match channel {
            Channel::Bluetooth if data_type != DataType::Text => {
                Err(LinkError::UnsupportedOnBluetooth { data_type }.into())
            }
            Channel::Bluetooth => Ok(BLUETOOTH_RATE_MBPS),
            Channel::WiFi => {
                let class = RangeClass::for_distance(distance)
                    .filter(|c| *c <= self.link.range)
                    .unwrap_or(self.link.range);
                Ok(self.link.rates.rate(data_type, class)?)
            }
        }
    }

    fn link_up(&self, conn: &Connection) -> bool {
        let (a, b) = &conn.endpoints;
        let radius = conn.channel.radius(self.link.range);
        linkmodel::within_radius(self.devices[a].position, self.devices[b].position, radius)
    }

    /// Starts a transfer from `from` over an Active connection. Returns the
    /// transfer id and its scheduled completion time.
    pub fn send(
        &mut self,
        conn_id: ConnectionId,
        from: &DeviceId,
        data_type: DataType,
        size_bits: f64,
        now: f64,
        trace: &mut Trace,
    ) -> Result<(TransferId, f64), ProtocolError> {
        let conn = self.connections.get(&conn_id).ok_or(ProtocolError::NoConnection(conn_id))?;
        if conn.state != ConnState::Active {
            return Err(ProtocolError::ConnectionClosed(conn_id));
        }
        let to = conn
            .peer_of(from)
            .cloned()
            .ok_or_else(|| ProtocolError::NotEndpoint { device: from.clone(), connection: conn_id })?;
        if !self.link_up(conn) {
            self.close_connection(conn_id, "out_of_range", now, trace);
            return Err(ProtocolError::LinkDown(conn_id));
        }
        let distance = linkmodel::distance(self.devices[from].position, self.devices[&to].position);
        let rate = self.rate_for(conn.channel, data_type, distance)?;
        let duration = duration_at_rate(size_bits, rate, self.link.overhead)?;
        let id = TransferId(self.next_transfer);
        self.next_transfer += 1;
        let end = now + duration;
        self.in_flight.insert(id);
        self.transfers.insert(
            id,
            TransferRecord {
                id,
                src: from.clone(),
                dst: Some(to.clone()),
                data_type,
                size_bits,
                delivered_bits: 0.0,
                start: now,
                expected_end: end,
                end: None,
                outcome: TransferOutcome::InFlight,
                route: TransferRoute::Direct { connection: conn_id },
                failure: None,
            },
        );
        trace.push(
            now,
            "send",
            Some(from),
            Some(&to),
            json!({ "transfer": id.to_string(), "conn": conn_id.to_string(), "type": data_type, "bits": size_bits, "mbps": rate }),
        );
        Ok((id, end))
    }

    /// Completes a transfer at its scheduled time. Returns the final outcome,
    /// or `None` if the transfer had already ended (e.g. its link broke).
    pub fn complete_transfer(
        &mut self,
        id: TransferId,
        now: f64,
        trace: &mut Trace,
    ) -> Result<Option<TransferOutcome>, ProtocolError> {
        let record = self.transfers.get(&id).ok_or(ProtocolError::UnknownTransfer(id))?;
        if record.outcome != TransferOutcome::InFlight {
            return Ok(None);
        }
        if let TransferRoute::Relay { .. } = record.route {
            let plan = self.relays.get(&id).expect("relay transfer has a plan").clone();
            if let Err(e) = self.cloud.continue_relay(&plan) {
                self.fail_transfer(id, 0.0, &e.to_string(), now, trace);
                return Ok(Some(TransferOutcome::Failed));
            }
        }
        self.in_flight.remove(&id);
        let record = self.transfers.get_mut(&id).expect("checked above");
        record.outcome = TransferOutcome::Delivered;
        record.delivered_bits = record.size_bits;
        record.end = Some(now);
        let detail = match &record.route {
            TransferRoute::Direct { connection } => {
                json!({ "transfer": id.to_string(), "conn": connection.to_string(), "type": record.data_type, "bits": record.size_bits })
            }
            TransferRoute::Relay { src_manet, dst_manet } => {
                json!({ "transfer": id.to_string(), "src_manet": src_manet, "dst_manet": dst_manet, "type": record.data_type, "bits": record.size_bits })
            }
        };
        let event = if matches!(record.route, TransferRoute::Relay { .. }) { "relay_delivered" } else { "transfer_done" };
        let (src, dst) = (record.src.clone(), record.dst.clone());
        trace.push(now, event, Some(&src), dst.as_ref().map(|d| d as &dyn ToString), detail);
        Ok(Some(TransferOutcome::Delivered))
    }

    fn fail_transfer(&mut self, id: TransferId, fraction: f64, reason: &str, now: f64, trace: &mut Trace) {
        self.in_flight.remove(&id);
        let record = self.transfers.get_mut(&id).expect("failing a known transfer");
        record.outcome = TransferOutcome::Failed;
        record.delivered_bits = record.size_bits * fraction.clamp(0.0, 1.0);
        record.end = Some(now);
        record.failure = Some(reason.to_string());
        let (src, dst) = (record.src.clone(), record.dst.clone());
        trace.push(
            now,
            "transfer_failed",
            Some(&src),
            dst.as_ref().map(|d| d as &dyn ToString),
            json!({ "transfer": id.to_string(), "delivered_bits": record.delivered_bits, "reason": reason }),
        );
    }

    /// Closes a connection, failing its in-flight transfers pro-rata.
    pub fn close_connection(&mut self, id: ConnectionId, reason: &str, now: f64, trace: &mut Trace) {
        let Some(conn) = self.connections.get_mut(&id) else { return };
        if conn.state == ConnState::Closed {
            return;
        }
        let was_active = conn.state == ConnState::Active;
        conn.state = ConnState::Closed;
        let (a, b) = conn.endpoints.clone();
        self.open_connections.remove(&id);
        trace.push(now, "connection_closed", Some(&a), Some(&b), json!({ "conn": id.to_string(), "reason": reason }));
        let in_flight: Vec<(TransferId, f64)> = self
            .in_flight
            .iter()
            .map(|t| &self.transfers[t])
            .filter(|t| t.route == TransferRoute::Direct { connection: id })
            .map(|t| (t.id, (now - t.start) / (t.expected_end - t.start)))
            .collect();
        for (t, fraction) in in_flight {
            self.fail_transfer(t, fraction, reason, now, trace);
        }
        if was_active {
            for d in [&a, &b] {
                let still = self.active_connections().any(|c| c.involves(d));
                if !still && self.devices[d].phase == Phase::Connected {
                    self.set_phase(d, Phase::ManetActive, now, trace);
                }
            }
        }
    }

    fn close_all_of(&mut self, id: &DeviceId, reason: &str, now: f64, trace: &mut Trace) {
        let ids: Vec<ConnectionId> = self.open().filter(|c| c.involves(id)).map(|c| c.id).collect();
        for c in ids {
            self.close_connection(c, reason, now, trace);
        }
    }

    /// Closes every Active connection whose endpoints drifted out of range.
    /// Returns the closed ids.
    pub fn check_links(&mut self, now: f64, trace: &mut Trace) -> Vec<ConnectionId> {
        let broken: Vec<ConnectionId> =
            self.active_connections().filter(|c| !self.link_up(c)).map(|c| c.id).collect();
        for &c in &broken {
            self.close_connection(c, "out_of_range", now, trace);
        }
        broken
    }

    /// Sends a payload from `id` to the gateway of `dst_manet` through the
    /// cloud. Returns the transfer id and the relay timing.
    pub fn relay(
        &mut self,
        id: &DeviceId,
        dst_manet: &ManetId,
        data_type: DataType,
        size_bits: f64,
        now: f64,
        trace: &mut Trace,
    ) -> Result<(TransferId, RelayPlan), ProtocolError> {
        let dev = self.dev(id)?;
        if !dev.phase.in_manet() {
            return Err(ProtocolError::NotManetActive(id.clone()));
        }
        let src_manet = dev.manet.clone().expect("MANET member has a MANET id");
        let plan = self.cloud.begin_relay(&src_manet, dst_manet, size_bits, now, trace)?;
        let tid = TransferId(self.next_transfer);
        self.next_transfer += 1;
        self.transfers.insert(
            tid,
            TransferRecord {
                id: tid,
                src: id.clone(),
                dst: None,
                data_type,
                size_bits,
                delivered_bits: 0.0,
                start: now,
                expected_end: now + plan.total_duration(),
                end: None,
                outcome: TransferOutcome::InFlight,
                route: TransferRoute::Relay { src_manet, dst_manet: dst_manet.clone() },
                failure: None,
            },
        );
        self.relays.insert(tid, plan.clone());
        self.in_flight.insert(tid);
        trace.push(
            now,
            "relay_send",
            Some(id),
            None,
            json!({ "transfer": tid.to_string(), "type": data_type, "bits": size_bits, "dst_manet": dst_manet }),
        );
        Ok((tid, plan))
    }

    /// The relay reaches the cloud and starts its second leg.
    pub fn relay_second_leg(&mut self, id: TransferId, now: f64, trace: &mut Trace) -> Result<(), ProtocolError> {
        let record = self.transfers.get(&id).ok_or(ProtocolError::UnknownTransfer(id))?;
        if record.outcome != TransferOutcome::InFlight {
            return Ok(());
        }
        let plan = self.relays.get(&id).ok_or(ProtocolError::UnknownTransfer(id))?.clone();
        match self.cloud.continue_relay(&plan) {
            Ok(gw) => {
                trace.push(now, "relay_second_leg", Some(&plan.src_gateway), Some(&gw), json!({ "transfer": id.to_string() }));
                self.transfers.get_mut(&id).expect("checked above").dst = Some(gw);
                Ok(())
            }
            Err(e) => {
                self.fail_transfer(id, 0.0, &e.to_string(), now, trace);
                Err(e.into())
            }
        }
    }
}
