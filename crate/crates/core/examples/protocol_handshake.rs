//! Drives the middleware by hand: registration, discovery, the two-phase
//! handshake, a transfer, and a handshake that times out because the target
//! walked out of range between request and confirmation.

use cmanet::cloud::{Cloud, CloudConfig};
use cmanet::ids::{DeviceId, NetConfig};
use cmanet::linkmodel::{Channel, DataType, RangeClass, RateTable};
use cmanet::middleware::{LinkSettings, Middleware, MiddlewareConfig};
use cmanet::mobility::Position;
use cmanet::numerics::LogNormalParams;
use cmanet::rng;
use cmanet::trace::Trace;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let link = LinkSettings {
        range: RangeClass::M50,
        rates: RateTable::default(),
        overhead: 0.0,
        lifetime: LogNormalParams::new(60f64.ln(), 0.6)?,
    };
    let cloud = Cloud::new(CloudConfig::default(), rng::stream(1, "cloud", "credentials"));
    let mut mw = Middleware::new(MiddlewareConfig::default(), link, cloud);
    let mut trace = Trace::new();

    let ids: Vec<DeviceId> = (0..3).map(DeviceId::indexed).collect();
    for (i, id) in ids.iter().enumerate() {
        let position = Position::new(10.0 + 20.0 * i as f64, 10.0);
        mw.add_device(id.clone(), position, Some(NetConfig("field".into())), i == 0, 10.0);
        mw.register(id, 0.0, &mut trace)?;
        mw.login(id, None, 0.0, &mut trace)?;
        mw.start_manet(id, 0.0, &mut trace)?;
    }
    let (a, b, c) = (&ids[0], &ids[1], &ids[2]);

    let found = mw.discover(a, Channel::WiFi, 1.0, &mut trace)?;
    println!("{a} sees {:?}", found.neighbors.iter().map(|(p, _)| p.as_str()).collect::<Vec<_>>());
    let peer = mw.best_peer(a, DataType::Image)?;
    let conn = mw.request_connection(a, &peer, 1.0, &mut trace)?;
    mw.deliver_request(conn, 1.005, &mut trace)?;
    mw.confirm(conn, 1.105, &mut trace)?;
    let (transfer, done_at) = mw.send(conn, a, DataType::Image, 8e6, 2.0, &mut trace)?;
    mw.complete_transfer(transfer, done_at, &mut trace)?;
    println!("image transfer to {peer} finished at t={done_at:.3}");

    // c accepts the request but has moved 200 m away before confirming
    mw.discover(b, Channel::WiFi, 3.0, &mut trace)?;
    let pending = mw.request_connection(b, c, 3.0, &mut trace)?;
    mw.deliver_request(pending, 3.005, &mut trace)?;
    mw.set_position(c, Position::new(250.0, 10.0))?;
    match mw.confirm(pending, 3.105, &mut trace) {
        Ok(()) => println!("unexpected: connection came up"),
        Err(e) => println!("{e}"),
    }

    println!("\n{} trace records:", trace.len());
    std::io::Write::write_all(&mut std::io::stdout(), &trace.to_jsonl())?;
    Ok(())
}
