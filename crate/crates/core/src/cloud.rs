//! Simulated cloud service: registry, authentication, session brokering,
//! gateway bookkeeping and inter-MANET relay.
//!
//! When a MANET has no gateway it keeps working locally; only the calls in
//! this module that need an uplink fail, with [`CloudError::NoUplink`].

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::{Credential, DeviceId, GrantId, ManetId, SessionToken};
use crate::rng::StreamRng;
use crate::trace::Trace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("device {0} is already registered")]
    DuplicateDevice(DeviceId),
    #[error("device {0} is not registered")]
    NotRegistered(DeviceId),
    #[error("authentication failed for {0}")]
    AuthFailure(String),
    #[error("MANET {0} has no uplink gateway")]
    NoUplink(ManetId),
    #[error("relay payload must be positive, got {0} bits")]
    InvalidPayload(f64),
    #[error("no connection candidates")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudConfig {
    /// Fixed latency added to each relay leg, seconds.
    pub leg_latency: f64,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self { leg_latency: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    /// The requesting device is itself the gateway.
    Direct,
    ViaGateway(DeviceId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionGrant {
    pub id: GrantId,
    pub device: DeviceId,
    pub manet: ManetId,
    pub route: Route,
    pub opened_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub device: DeviceId,
    pub opened_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayStatus {
    pub manet_id: ManetId,
    pub gateway_device: Option<DeviceId>,
    pub uplink: bool,
    /// Uplink rate of the gateway, Mbps. Zero without a gateway.
    pub uplink_mbps: f64,
}

/// A MANET member as seen by gateway election.
#[derive(Debug, Clone, PartialEq)]
pub struct GatewayCandidate {
    pub device: DeviceId,
    pub uplink: bool,
    /// Expected remaining life of the member's uplink, seconds.
    pub remaining_life: f64,
    pub uplink_mbps: f64,
}

/// Picks the uplink-capable member with the longest expected remaining
/// uplink life; ties go to the lower id.
pub fn elect_gateway(manet: &ManetId, members: &[GatewayCandidate]) -> GatewayStatus {
    let best = members.iter().filter(|m| m.uplink).min_by(|a, b| {
        b.remaining_life
            .total_cmp(&a.remaining_life)
            .then_with(|| a.device.cmp(&b.device))
    });
    match best {
        Some(m) => GatewayStatus {
            manet_id: manet.clone(),
            gateway_device: Some(m.device.clone()),
            uplink: true,
            uplink_mbps: m.uplink_mbps,
        },
        None => GatewayStatus { manet_id: manet.clone(), gateway_device: None, uplink: false, uplink_mbps: 0.0 },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionCandidate {
    pub peer: DeviceId,
    pub expected_life: f64,
    pub rate_mbps: f64,
}

/// Best peer by `expected_life * rate`; ties go to the lower id.
pub fn select_best_connection(candidates: &[ConnectionCandidate]) -> Result<DeviceId, CloudError> {
    candidates
        .iter()
        .min_by(|a, b| {
            let sa = a.expected_life * a.rate_mbps;
            let sb = b.expected_life * b.rate_mbps;
            sb.total_cmp(&sa).then_with(|| a.peer.cmp(&b.peer))
        })
        .map(|c| c.peer.clone())
        .ok_or(CloudError::NoCandidates)
}

/// Timing of an accepted relay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayPlan {
    pub src_manet: ManetId,
    pub dst_manet: ManetId,
    pub src_gateway: DeviceId,
    pub dst_gateway: DeviceId,
    pub size_bits: f64,
    pub started_at: f64,
    /// Source gateway to cloud, seconds (including latency).
    pub first_leg: f64,
    /// Cloud to destination gateway, seconds (including latency).
    pub second_leg: f64,
}

impl RelayPlan {
    pub fn first_leg_end(&self) -> f64 {
        self.started_at + self.first_leg
    }

    pub fn total_duration(&self) -> f64 {
        self.first_leg + self.second_leg
    }
}

pub struct Cloud {
    config: CloudConfig,
    rng: StreamRng,
    devices: BTreeMap<DeviceId, String>,
    sessions: BTreeMap<SessionToken, SessionEntry>,
    session_of: BTreeMap<DeviceId, SessionToken>,
    grants: BTreeMap<GrantId, SessionGrant>,
    gateways: BTreeMap<ManetId, GatewayStatus>,
    relays: BTreeMap<(ManetId, ManetId), (DeviceId, DeviceId)>,
    next_grant: u64,
}

fn digest(secret: &str) -> String {
    hex::encode(Sha256::digest(secret.as_bytes()))
}

impl Cloud {
    pub fn new(config: CloudConfig, rng: StreamRng) -> Self {
        Self {
            config,
            rng,
            devices: BTreeMap::new(),
            sessions: BTreeMap::new(),
            session_of: BTreeMap::new(),
            grants: BTreeMap::new(),
            gateways: BTreeMap::new(),
            relays: BTreeMap::new(),
            next_grant: 0,
        }
    }

    pub fn config(&self) -> &CloudConfig {
        &self.config
    }

    fn random_hex(&mut self) -> String {
        let mut bytes = [0u8; 16];
        self.rng.fill_bytes(&mut bytes);
        hex::encode(bytes)
    }

    pub fn register(&mut self, device: &DeviceId, now: f64, trace: &mut Trace) -> Result<Credential, CloudError> {
        if self.devices.contains_key(device) {
            return Err(CloudError::DuplicateDevice(device.clone()));
        }
        let secret = self.random_hex();
        self.devices.insert(device.clone(), digest(&secret));
        trace.push(now, "cloud_register", Some(device), None, json!({ "registered": self.devices.len() }));
        Ok(Credential(secret))
    }

    pub fn is_registered(&self, device: &DeviceId) -> bool {
        self.devices.contains_key(device)
    }

    pub fn registered_count(&self) -> usize {
        self.devices.len()
    }

    /// Authenticates and opens the device's login session, replacing any
    /// previous one.
    pub fn login(
        &mut self,
        device: &DeviceId,
        password: &Credential,
        now: f64,
        trace: &mut Trace,
    ) -> Result<SessionToken, CloudError> {
        let stored = self.devices.get(device).ok_or_else(|| CloudError::NotRegistered(device.clone()))?;
        if *stored != digest(&password.0) {
            trace.push(now, "cloud_auth_failure", Some(device), None, json!({}));
            return Err(CloudError::AuthFailure(device.to_string()));
        }
        if let Some(old) = self.session_of.remove(device) {
            self.sessions.remove(&old);
        }
        let token = SessionToken::new(format!("t{}", self.random_hex()));
        self.sessions.insert(token.clone(), SessionEntry { device: device.clone(), opened_at: now });
        self.session_of.insert(device.clone(), token.clone());
        trace.push(now, "cloud_login", Some(device), None, json!({}));
        Ok(token)
    }

    pub fn logout(&mut self, device: &DeviceId, now: f64, trace: &mut Trace) {
        if let Some(token) = self.session_of.remove(device) {
            self.sessions.remove(&token);
            self.grants.retain(|_, g| &g.device != device);
            trace.push(now, "cloud_logout", Some(device), None, json!({}));
        }
    }

    pub fn has_session(&self, device: &DeviceId) -> bool {
        self.session_of.contains_key(device)
    }

    pub fn session_device(&self, token: &SessionToken) -> Option<&DeviceId> {
        self.sessions.get(token).map(|e| &e.device)
    }

    /// Grants a connectivity session through the MANET's gateway.
    pub fn open_session(
        &mut self,
        token: &SessionToken,
        manet: &ManetId,
        now: f64,
        trace: &mut Trace,
    ) -> Result<SessionGrant, CloudError> {
        let device = self
            .sessions
            .get(token)
            .map(|e| e.device.clone())
            .ok_or_else(|| CloudError::AuthFailure(format!("token {token}")))?;
        let gateway = self
            .active_gateway(manet)
            .ok_or_else(|| CloudError::NoUplink(manet.clone()))?
            .clone();
        let route = if gateway == device { Route::Direct } else { Route::ViaGateway(gateway) };
        let grant = SessionGrant { id: GrantId(self.next_grant), device: device.clone(), manet: manet.clone(), route, opened_at: now };
        self.next_grant += 1;
        self.grants.insert(grant.id, grant.clone());
        trace.push(
            now,
            "cloud_session",
            Some(&device),
            None,
            json!({ "grant": grant.id.to_string(), "manet": manet, "route": grant.route }),
        );
        Ok(grant)
    }

    pub fn grants(&self) -> impl Iterator<Item = &SessionGrant> {
        self.grants.values()
    }

    /// Stores a new election result; returns whether the gateway changed.
    pub fn set_gateway(&mut self, status: GatewayStatus, now: f64, trace: &mut Trace) -> bool {
        let changed = self
            .gateways
            .get(&status.manet_id)
            .map(|old| old.gateway_device != status.gateway_device)
            .unwrap_or(true);
        if changed {
            trace.push(
                now,
                "gateway_elected",
                status.gateway_device.as_ref().map(|d| d as &dyn ToString),
                None,
                json!({ "manet": status.manet_id, "uplink": status.uplink }),
            );
        }
        self.gateways.insert(status.manet_id.clone(), status);
        changed
    }

    pub fn gateway(&self, manet: &ManetId) -> Option<&GatewayStatus> {
        self.gateways.get(manet)
    }

    // Gateway of the MANET, if it has one with an open cloud session.
    fn active_gateway(&self, manet: &ManetId) -> Option<&DeviceId> {
        self.gateways
            .get(manet)
            .and_then(|g| g.gateway_device.as_ref())
            .filter(|d| self.has_session(d))
    }

    /// Validates both gateways and computes leg timings.
    pub fn begin_relay(
        &mut self,
        src_manet: &ManetId,
        dst_manet: &ManetId,
        size_bits: f64,
        now: f64,
        trace: &mut Trace,
    ) -> Result<RelayPlan, CloudError> {
        if !(size_bits > 0.0 && size_bits.is_finite()) {
            return Err(CloudError::InvalidPayload(size_bits));
        }
        let src_gateway = self.active_gateway(src_manet).cloned().ok_or_else(|| CloudError::NoUplink(src_manet.clone()))?;
        let dst_gateway = self.active_gateway(dst_manet).cloned().ok_or_else(|| CloudError::NoUplink(dst_manet.clone()))?;
        let src_rate = self.gateways[src_manet].uplink_mbps;
        let dst_rate = self.gateways[dst_manet].uplink_mbps;
        let leg = |rate: f64| size_bits / (rate * 1e6) + self.config.leg_latency;
        let plan = RelayPlan {
            src_manet: src_manet.clone(),
            dst_manet: dst_manet.clone(),
            src_gateway: src_gateway.clone(),
            dst_gateway: dst_gateway.clone(),
            size_bits,
            started_at: now,
            first_leg: leg(src_rate),
            second_leg: leg(dst_rate),
        };
        self.relays.insert((src_manet.clone(), dst_manet.clone()), (src_gateway.clone(), dst_gateway.clone()));
        trace.push(
            now,
            "cloud_relay_start",
            Some(&src_gateway),
            Some(&dst_gateway),
            json!({ "src_manet": src_manet, "dst_manet": dst_manet, "bits": size_bits }),
        );
        Ok(plan)
    }

    /// Checks that the destination side can still take the second leg.
    pub fn continue_relay(&self, plan: &RelayPlan) -> Result<DeviceId, CloudError> {
        if self.active_gateway(&plan.src_manet).is_none() {
            return Err(CloudError::NoUplink(plan.src_manet.clone()));
        }
        self.active_gateway(&plan.dst_manet)
            .cloned()
            .ok_or_else(|| CloudError::NoUplink(plan.dst_manet.clone()))
    }

    pub fn relay_table(&self) -> &BTreeMap<(ManetId, ManetId), (DeviceId, DeviceId)> {
        &self.relays
    }

    /// Lists broken registry invariants; empty when consistent.
    pub fn check_consistency(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (token, entry) in &self.sessions {
            if !self.devices.contains_key(&entry.device) {
                out.push(format!("session {token} belongs to unregistered {}", entry.device));
            }
            if self.session_of.get(&entry.device) != Some(token) {
                out.push(format!("device {} has more than one session", entry.device));
            }
        }
        if self.session_of.len() != self.sessions.len() {
            out.push("session index out of sync".into());
        }
        for grant in self.grants.values() {
            if !self.devices.contains_key(&grant.device) {
                out.push(format!("grant {} for unregistered {}", grant.id, grant.device));
            }
        }
        for status in self.gateways.values() {
            if status.uplink != status.gateway_device.is_some() {
                out.push(format!("MANET {} has an inconsistent gateway status", status.manet_id));
            }
        }
        out
    }
}
