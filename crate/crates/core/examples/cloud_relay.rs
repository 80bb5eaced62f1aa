//! Runs the two-MANET relay scenario and prints the gateway and relay events.

use cmanet::audit;
use cmanet::engine::{self, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/two_manets_relay.toml");
    let result = engine::run(ScenarioConfig::load(path)?)?;
    for r in result.trace.records() {
        if r.event.starts_with("gateway") || r.event.contains("relay") || r.event == "uplink" || r.event == "action_failed" {
            println!("t={:<7.3} {:<18} {} {}", r.t, r.event, r.src.as_deref().unwrap_or("-"), r.detail);
        }
    }
    println!("gateway changes: {}", result.summary.gateway_changes);
    println!("audit violations: {:?}", audit::violations(&result.trace));
    Ok(())
}
