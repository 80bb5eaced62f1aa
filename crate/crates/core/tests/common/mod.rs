//! Random scenario generator shared by the integration tests.
#![allow(dead_code)]

use cmanet::engine::{Action, ArenaConfig, DeviceOverride, DevicesConfig, MobilityConfig, ScenarioConfig, WorkloadItem};
use cmanet::linkmodel::{Channel, DataType, RangeClass};
use cmanet::middleware::MiddlewareConfig;
use cmanet::rng::{self, StreamRng};
use rand::Rng;

const NETS: [&str; 3] = ["manet-0", "manet-1", ""];

fn pick<T: Copy>(rng: &mut StreamRng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn data_type(rng: &mut StreamRng) -> DataType {
    pick(rng, &DataType::ALL)
}

fn random_action(rng: &mut StreamRng, n: usize) -> Action {
    let dev = |rng: &mut StreamRng| rng.random_range(0..n);
    let size = |rng: &mut StreamRng| 10f64.powf(rng.random_range(4.0..7.0));
    match rng.random_range(0..15) {
        0 => Action::Register { device: dev(rng) },
        1 => Action::Login {
            device: dev(rng),
            password: rng.random_bool(0.1).then(|| "guess".to_string()),
        },
        2 => Action::StartManet { device: dev(rng) },
        3 => Action::LeaveManet { device: dev(rng) },
        4 => Action::Logout { device: dev(rng) },
        5 => Action::Discover {
            device: dev(rng),
            channel: if rng.random_bool(0.8) { Channel::WiFi } else { Channel::Bluetooth },
        },
        6 => Action::Connect {
            device: dev(rng),
            peer: rng.random_bool(0.6).then(|| dev(rng)),
            data_type: data_type(rng),
        },
        7 => Action::Send {
            device: dev(rng),
            peer: dev(rng),
            data_type: data_type(rng),
            size_bits: size(rng),
            repeat: rng.random_bool(0.3),
        },
        8 => Action::Blacklist { device: dev(rng), peer: dev(rng) },
        9 => Action::SetUplink { device: dev(rng), up: rng.random_bool(0.5) },
        10 => Action::OpenSession { device: dev(rng) },
        11 => Action::Relay {
            device: dev(rng),
            dst_manet: pick(rng, &NETS[..2]).to_string(),
            data_type: data_type(rng),
            size_bits: size(rng),
        },
        12 => Action::Exchange { interval: rng.random_range(1.0..10.0), data_type: data_type(rng), size_bits: size(rng) },
        _ => Action::Bootstrap {
            devices: rng.random_bool(0.5).then(|| (0..n).filter(|_| rng.random_bool(0.5)).collect()),
        },
    }
}

/// A small random scenario whose workload mixes legal and illegal
/// operations in random order.
pub fn random_scenario(case: u64) -> ScenarioConfig {
    let mut rng = rng::stream(case, "tests", "random_scenario");
    let n = rng.random_range(2..=8);
    let side = rng.random_range(40.0..250.0);
    let duration = rng.random_range(20.0..90.0);
    let mobility = MobilityConfig {
        lambda: rng.random_range(0.0..=1.0),
        mean_speed: rng.random_range(0.0..25.0),
        mean_direction: rng.random_range(0.0..std::f64::consts::TAU),
        mean_direction_deg: None,
        speed_sigma: rng.random_range(0.0..5.0),
        direction_sigma: rng.random_range(0.0..1.0),
        max_speed: 50.0,
    };
    let mut overrides = Vec::new();
    for index in 0..n {
        if rng.random_bool(0.4) {
            overrides.push(DeviceOverride {
                index,
                position: None,
                uplink: Some(rng.random_bool(0.4)),
                mobility: None,
                net_config: Some(pick(&mut rng, &NETS).to_string()),
            });
        }
    }
    let mut workload: Vec<WorkloadItem> = Vec::new();
    if rng.random_bool(0.7) {
        workload.push(WorkloadItem { at: 0.0, action: Action::Bootstrap { devices: None } });
    }
    for _ in 0..rng.random_range(5..40) {
        workload.push(WorkloadItem { at: rng.random_range(0.0..duration), action: random_action(&mut rng, n) });
    }
    ScenarioConfig {
        name: format!("random-{case}"),
        seed: case,
        duration,
        dt: pick(&mut rng, &[0.25, 0.5, 1.0]),
        arena: ArenaConfig { width: side, height: side },
        range: pick(&mut rng, &RangeClass::ALL),
        middleware: MiddlewareConfig {
            accept_delay: rng.random_range(0.01..1.5),
            confirm_timeout: rng.random_range(0.5..3.0),
            beacon_interval: rng.random_bool(0.3).then(|| rng.random_range(1.0..10.0)),
            ..MiddlewareConfig::default()
        },
        devices: DevicesConfig {
            count: n,
            uplink_count: rng.random_range(0..=n),
            mobility,
            overrides,
            ..DevicesConfig::default()
        },
        workload,
        ..ScenarioConfig::default()
    }
}
