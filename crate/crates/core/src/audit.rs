//! Trace audits: protocol invariants checked by replaying a run trace, and
//! run summaries recomputed from the trace alone.

use std::collections::{BTreeMap, BTreeSet};

use crate::linkmodel::DataType;
use crate::middleware::Phase;
use crate::trace::{Trace, TraceRecord};

fn allowed(from: Phase, to: Phase) -> bool {
    use Phase::*;
    matches!(
        (from, to),
        (Installed, Registered)
            | (Registered, LoggedIn)
            | (LoggedIn, ManetActive)
            | (ManetActive, Connected)
            | (Connected, ManetActive)
            | (ManetActive, LoggedIn)
            | (Connected, LoggedIn)
            | (LoggedIn, Registered)
    )
}

fn detail_str<'a>(r: &'a TraceRecord, key: &str) -> Option<&'a str> {
    r.detail.get(key).and_then(|v| v.as_str())
}

fn detail_f64(r: &TraceRecord, key: &str) -> Option<f64> {
    r.detail.get(key).and_then(|v| v.as_f64())
}

/// Phase changes must follow the registration order; a device may only step
/// back by leaving its MANET or logging out.
pub fn phase_violations(trace: &Trace) -> Vec<String> {
    let mut phase: BTreeMap<String, Phase> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace.events("phase") {
        let dev = r.src.clone().unwrap_or_default();
        let (Some(from), Some(to)) =
            (detail_str(r, "from").and_then(Phase::parse), detail_str(r, "to").and_then(Phase::parse))
        else {
            out.push(format!("t={} {dev}: unreadable phase event", r.t));
            continue;
        };
        let current = phase.entry(dev.clone()).or_insert(Phase::Installed);
        if *current != from {
            out.push(format!("t={} {dev}: phase event from {from:?} but device was {current:?}", r.t));
        }
        if !allowed(from, to) {
            out.push(format!("t={} {dev}: illegal transition {from:?} -> {to:?}", r.t));
        }
        *current = to;
    }
    out
}

fn pair(a: &str, b: &str) -> (String, String) {
    (a.to_string(), b.to_string())
}

/// No Active connection between a blacklisted pair, and every Active
/// connection within radius when confirmed.
pub fn connection_violations(trace: &Trace) -> Vec<String> {
    let mut blacklist: BTreeSet<(String, String)> = BTreeSet::new();
    let mut active: BTreeMap<String, (String, String)> = BTreeMap::new();
    let mut out = Vec::new();
    let barred = |bl: &BTreeSet<(String, String)>, a: &str, b: &str| bl.contains(&pair(a, b)) || bl.contains(&pair(b, a));
    for r in trace.records() {
        let (a, b) = (r.src.as_deref().unwrap_or(""), r.dst.as_deref().unwrap_or(""));
        match r.event.as_str() {
            "blacklist" => {
                blacklist.insert(pair(a, b));
                for (conn, (x, y)) in &active {
                    if barred(&blacklist, x, y) {
                        out.push(format!("t={} {conn}: active between blacklisted {x} and {y}", r.t));
                    }
                }
            }
            "connect_active" => {
                let conn = detail_str(r, "conn").unwrap_or("?").to_string();
                if barred(&blacklist, a, b) {
                    out.push(format!("t={} {conn}: activated between blacklisted {a} and {b}", r.t));
                }
                match (detail_f64(r, "distance"), detail_f64(r, "radius")) {
                    (Some(d), Some(rad)) if d <= rad => {}
                    (d, rad) => out.push(format!("t={} {conn}: activated at distance {d:?} beyond radius {rad:?}", r.t)),
                }
                active.insert(conn, pair(a, b));
            }
            "connection_closed" => {
                if let Some(conn) = detail_str(r, "conn") {
                    active.remove(conn);
                }
            }
            _ => {}
        }
    }
    out
}

/// A relay may only be delivered while both MANETs have a gateway.
pub fn relay_violations(trace: &Trace) -> Vec<String> {
    let mut uplink: BTreeMap<String, bool> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace.records() {
        match r.event.as_str() {
            "gateway_elected" => {
                if let Some(m) = detail_str(r, "manet") {
                    let up = r.detail.get("uplink").and_then(|v| v.as_bool()).unwrap_or(false);
                    uplink.insert(m.to_string(), up);
                }
            }
            "relay_delivered" => {
                for key in ["src_manet", "dst_manet"] {
                    let m = detail_str(r, key).unwrap_or("");
                    if !uplink.get(m).copied().unwrap_or(false) {
                        out.push(format!("t={}: relay delivered while {m} had no gateway", r.t));
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// All audits together.
pub fn violations(trace: &Trace) -> Vec<String> {
    let mut out = phase_violations(trace);
    out.extend(connection_violations(trace));
    out.extend(relay_violations(trace));
    out
}

/// Per-type throughput recomputed from trace events alone; matches the run
/// summary's measurement.
pub fn throughput_from_trace(trace: &Trace) -> BTreeMap<DataType, f64> {
    let mut started: BTreeMap<String, (DataType, f64)> = BTreeMap::new();
    // type -> (first start, last end, bits)
    let mut acc: BTreeMap<DataType, (f64, f64, f64)> = BTreeMap::new();
    for r in trace.records() {
        let Some(id) = detail_str(r, "transfer") else { continue };
        match r.event.as_str() {
            "send" | "relay_send" => {
                if let Some(dt) = r.detail.get("type").and_then(|v| serde_json::from_value(v.clone()).ok()) {
                    started.insert(id.to_string(), (dt, r.t));
                }
            }
            "transfer_done" | "relay_delivered" | "transfer_failed" => {
                let Some(&(dt, start)) = started.get(id) else { continue };
                let bits = if r.event == "transfer_failed" {
                    detail_f64(r, "delivered_bits")
                } else {
                    detail_f64(r, "bits")
                }
                .unwrap_or(0.0);
                let e = acc.entry(dt).or_insert((f64::INFINITY, f64::NEG_INFINITY, 0.0));
                e.0 = e.0.min(start);
                e.1 = e.1.max(r.t);
                e.2 += bits;
            }
            _ => {}
        }
    }
    DataType::ALL
        .iter()
        .map(|&dt| {
            let v = match acc.get(&dt) {
                Some(&(s, e, bits)) if e > s => bits / ((e - s) * 1e6),
                _ => 0.0,
            };
            (dt, v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn phase(t: &mut Trace, dev: &str, from: &str, to: &str) {
        t.push(0.0, "phase", Some(&dev), None, json!({ "from": from, "to": to }));
    }

    #[test]
    fn legal_walk_passes() {
        let mut t = Trace::new();
        for (f, to) in [
            ("Installed", "Registered"),
            ("Registered", "LoggedIn"),
            ("LoggedIn", "ManetActive"),
            ("ManetActive", "Connected"),
            ("Connected", "ManetActive"),
            ("ManetActive", "LoggedIn"),
            ("LoggedIn", "Registered"),
        ] {
            phase(&mut t, "d0", f, to);
        }
        assert!(phase_violations(&t).is_empty());
    }

    #[test]
    fn skipped_phase_is_caught() {
        let mut t = Trace::new();
        phase(&mut t, "d0", "Installed", "Registered");
        phase(&mut t, "d0", "Registered", "ManetActive");
        assert_eq!(phase_violations(&t).len(), 1);
        let mut t = Trace::new();
        phase(&mut t, "d0", "LoggedIn", "ManetActive");
        assert_eq!(phase_violations(&t).len(), 1);
    }

    #[test]
    fn blacklisted_active_is_caught() {
        let mut t = Trace::new();
        t.push(0.0, "blacklist", Some(&"a"), Some(&"b"), json!({}));
        t.push(1.0, "connect_active", Some(&"b"), Some(&"a"), json!({ "conn": "c0", "distance": 1.0, "radius": 50.0 }));
        assert_eq!(connection_violations(&t).len(), 1);
    }

    #[test]
    fn out_of_range_activation_is_caught() {
        let mut t = Trace::new();
        t.push(1.0, "connect_active", Some(&"b"), Some(&"a"), json!({ "conn": "c0", "distance": 51.0, "radius": 50.0 }));
        assert_eq!(connection_violations(&t).len(), 1);
    }

    #[test]
    fn relay_without_gateway_is_caught() {
        let mut t = Trace::new();
        t.push(0.0, "gateway_elected", Some(&"g"), None, json!({ "manet": "m1", "uplink": true }));
        t.push(1.0, "relay_delivered", Some(&"g"), None, json!({ "src_manet": "m1", "dst_manet": "m2" }));
        assert_eq!(relay_violations(&t).len(), 1);
    }
}
