//! Runs a scenario file and writes its artifacts.
//!
//!     cargo run --release --example run_scenario -- scenarios/mobile_exchange.toml out/

use cmanet::engine::{self, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/mobile_exchange.toml").to_string());
    let out = args.next();

    let config = ScenarioConfig::load(&path)?;
    config.validate()?;
    let result = engine::run(config)?;
    if let Some(dir) = &out {
        result.write_artifacts(dir)?;
        println!("artifacts in {dir}");
    }
    println!("{}", serde_json::to_string_pretty(&result.summary)?);
    Ok(())
}
