//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//!     cargo test --release --test acceptance
//!
//! Arguments without a leading dash filter criteria by substring.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use cmanet::audit;
use cmanet::cloud::{Cloud, CloudConfig};
use cmanet::engine::{self, ScenarioConfig};
use cmanet::experiments::{self, TableId, ALL_TABLES, THROUGHPUT_TOLERANCE};
use cmanet::ids::{DeviceId, NetConfig};
use cmanet::linkmodel::{Channel, RangeClass, RateTable};
use cmanet::metrics::{
    chain_entropy, stationary_distribution, symbol_entropy, LogBase, SymbolDistribution, TransitionMatrix,
};
use cmanet::middleware::{LinkSettings, Middleware, MiddlewareConfig, ProtocolError};
use cmanet::mobility::{gm_step, integrate_position, Arena, MobilityParams, MobilityState, Noise, Position};
use cmanet::numerics::LogNormalParams;
use cmanet::oracle;
use cmanet::rng;
use cmanet::trace::Trace;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit_s: f64, started: Instant) -> (bool, String) {
    let took = started.elapsed();
    (took <= Duration::from_secs_f64(limit_s), format!("{:.2} s of {limit_s} s", took.as_secs_f64()))
}

fn throughput(tables: &[TableId]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for &t in tables {
        let started = Instant::now();
        let table = experiments::throughput_table(t, None).map_err(|e| e.to_string())?;
        let (fast, took) = within(5.0, started);
        let worst = table.rows.iter().map(|r| r.deviation_pct.abs()).fold(0.0, f64::max);
        ok &= table.within_tolerance() && fast;
        let cells: Vec<String> =
            table.rows.iter().map(|r| format!("{} {:.3}/{}", r.data_type, r.simulated_mbps, r.reference_mbps)).collect();
        parts.push(format!("table {} [{}] worst {worst:.3}% (limit {}%), {took}", t.number(), cells.join(", "), THROUGHPUT_TOLERANCE * 100.0));
    }
    check(ok, parts.join("; "))
}

fn transmission_ordering() -> Outcome {
    let started = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for t in [TableId::Table1, TableId::Table2] {
        let table = experiments::transmission_table(t, None, 0).map_err(|e| e.to_string())?;
        let cols = table.ordered_columns();
        ok &= table.ordering_holds();
        let failing: Vec<f64> = table.epsilons.iter().zip(&cols).filter(|(_, ok)| !**ok).map(|(e, _)| *e).collect();
        parts.push(format!("table {} at {} m/s: {}/{} columns ordered {failing:?}", t.number(), table.speed, cols.iter().filter(|c| **c).count(), cols.len()));
    }
    let (fast, took) = within(60.0, started);
    parts.push(took);
    check(ok && fast, parts.join("; "))
}

fn session_life_oracle() -> Outcome {
    let started = Instant::now();
    let r = oracle::check_session_life(10_000_000, 2024);
    let (fast, took) = within(60.0, started);
    check(
        r.passed && fast,
        format!("{} grid points, max relative deviation {:.3e} (limit {:e}), worst {}; {took}", r.cases, r.max_deviation, r.tolerance, r.worst_case),
    )
}

fn marcum_oracle() -> Outcome {
    let r = oracle::check_marcum(1000, 2024);
    check(r.passed, format!("{} pairs, max abs deviation {:.3e} (limit {:e}), worst {}", r.cases, r.max_deviation, r.tolerance, r.worst_case))
}

fn entropy_suite() -> Outcome {
    let mut failures = Vec::new();
    for k in 2..=6 {
        let identity = TransitionMatrix::new((0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect())
            .map_err(|e| e.to_string())?;
        let pi = vec![1.0 / k as f64; k];
        let h = chain_entropy(&identity, &pi, LogBase::Two).map_err(|e| e.to_string())?;
        if h != 0.0 {
            failures.push(format!("identity {k}x{k}: {h}"));
        }
        let uniform = TransitionMatrix::new(vec![vec![1.0 / k as f64; k]; k]).map_err(|e| e.to_string())?;
        let pi = stationary_distribution(&uniform).map_err(|e| e.to_string())?;
        for (base, expected) in [(LogBase::Two, (k as f64).log2()), (LogBase::E, (k as f64).ln())] {
            let h = chain_entropy(&uniform, &pi, base).map_err(|e| e.to_string())?;
            if (h - expected).abs() > 1e-12 {
                failures.push(format!("uniform {k}x{k} {base:?}: {h} vs {expected}"));
            }
        }
    }
    let rows = vec![vec![0.9, 0.1], vec![0.5, 0.5]];
    let m = TransitionMatrix::new(rows.clone()).map_err(|e| e.to_string())?;
    let pi = stationary_distribution(&m).map_err(|e| e.to_string())?;
    let h = chain_entropy(&m, &pi, LogBase::Two).map_err(|e| e.to_string())?;
    let brute = oracle::chain_entropy_brute(&rows, 2.0);
    if (h - brute).abs() > 1e-10 {
        failures.push(format!("two-state chain: {h} vs brute force {brute}"));
    }
    let third = vec![1.0 / 3.0; 3];
    let dist = SymbolDistribution::new(third.clone(), third.clone(), third).map_err(|e| e.to_string())?;
    let s = symbol_entropy(&dist, 1.0);
    if s != 3.0 {
        failures.push(format!("uniform symbol entropy {s:?} is not exactly 3"));
    }
    let detail = format!("two-state chain {h:.12} bits vs brute force {brute:.12}; uniform symbol entropy {s}");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(failures.join("; "))
    }
}

fn mobility_statistics() -> Outcome {
    // memory 0.5: speed is AR(1) with stationary sd equal to speed_sigma, so
    // the mean of n steps has standard error sigma * sqrt((1 + l) / ((1 - l) n))
    let (lambda, mean_speed, sigma, n) = (0.5, 10.0, 1.0, 100_000usize);
    let params = MobilityParams { lambda, mean_speed, mean_direction: 1.0, speed_sigma: sigma, direction_sigma: 0.3, max_speed: 100.0 };
    let arena = Arena::new(1000.0, 1000.0).map_err(|e| e.to_string())?;
    let mut rng = rng::stream(2024, "d000", "mobility");
    let mut state = MobilityState { position: Position::new(500.0, 500.0), speed: mean_speed, direction: 1.0 };
    let (mut sum, mut clamped) = (0.0, 0usize);
    for _ in 0..n {
        let noise = Noise { speed: rng.sample(StandardNormal), direction: rng.sample(StandardNormal) };
        state = integrate_position(gm_step(state, &params, noise), 1.0, &arena);
        sum += state.speed;
        if state.speed <= 0.0 || state.speed >= params.max_speed {
            clamped += 1;
        }
    }
    let mean = sum / n as f64;
    let se = sigma * ((1.0 + lambda) / ((1.0 - lambda) * n as f64)).sqrt();
    let z = (mean - mean_speed) / se;
    let stats_ok = z.abs() <= 3.0 && clamped == 0;

    // full memory: no noise enters, so the path is a straight line between
    // wall contacts and the heading only changes at a contact
    let straight = MobilityParams { lambda: 1.0, mean_speed: 7.0, mean_direction: 0.0, speed_sigma: 3.0, direction_sigma: 1.0, max_speed: 20.0 };
    let box_arena = Arena::new(100.0, 60.0).map_err(|e| e.to_string())?;
    let mut s = MobilityState { position: Position::new(20.0, 30.0), speed: 7.0, direction: 0.37 };
    let (mut contacts, mut worst_offset, mut bad_turns) = (0, 0.0f64, 0);
    for _ in 0..5000 {
        let noise = Noise { speed: rng.sample(StandardNormal), direction: rng.sample(StandardNormal) };
        let next = integrate_position(gm_step(s, &straight, noise), 1.0, &box_arena);
        let (dx, dy) = (s.speed * s.direction.cos(), s.speed * s.direction.sin());
        let (rx, ry) = (s.position.x + dx, s.position.y + dy);
        let hits_wall = !(0.0..=box_arena.width).contains(&rx) || !(0.0..=box_arena.height).contains(&ry);
        if next.direction == s.direction {
            if hits_wall {
                bad_turns += 1;
            }
            worst_offset = worst_offset.max((next.position.x - rx).abs()).max((next.position.y - ry).abs());
        } else {
            contacts += 1;
            if !hits_wall {
                bad_turns += 1;
            }
        }
        if next.speed != s.speed {
            bad_turns += 1;
        }
        s = next;
    }
    let straight_ok = worst_offset <= 1e-9 && bad_turns == 0 && contacts > 10;
    check(
        stats_ok && straight_ok,
        format!(
            "lambda=0.5: mean speed {mean:.5} vs {mean_speed}, {z:+.2} SE (limit 3), clamp hits {clamped}; lambda=1: {contacts} wall contacts, max off-line step {worst_offset:.1e} m, unexpected turns {bad_turns}"
        ),
    )
}

fn handshake_timeout_fires() -> Result<String, String> {
    let link = LinkSettings {
        range: RangeClass::M50,
        rates: RateTable::default(),
        overhead: 0.0,
        lifetime: LogNormalParams::new(60f64.ln(), 0.6).map_err(|e| e.to_string())?,
    };
    let cloud = Cloud::new(CloudConfig::default(), rng::stream(1, "cloud", "credentials"));
    let mut mw = Middleware::new(MiddlewareConfig::default(), link, cloud);
    let mut trace = Trace::new();
    let (a, b) = (DeviceId::indexed(0), DeviceId::indexed(1));
    for (id, x) in [(&a, 10.0), (&b, 45.0)] {
        mw.add_device(id.clone(), Position::new(x, 10.0), Some(NetConfig("m".into())), false, 10.0);
        mw.register(id, 0.0, &mut trace).map_err(|e| e.to_string())?;
        mw.login(id, None, 0.0, &mut trace).map_err(|e| e.to_string())?;
        mw.start_manet(id, 0.0, &mut trace).map_err(|e| e.to_string())?;
    }
    mw.discover(&a, Channel::WiFi, 1.0, &mut trace).map_err(|e| e.to_string())?;
    let conn = mw.request_connection(&a, &b, 1.0, &mut trace).map_err(|e| e.to_string())?;
    mw.deliver_request(conn, 1.005, &mut trace).map_err(|e| e.to_string())?;
    // b crosses out of the 50 m radius before it confirms
    mw.set_position(&b, Position::new(75.0, 10.0)).map_err(|e| e.to_string())?;
    let outcome = mw.confirm(conn, 1.105, &mut trace);
    let timed_out = matches!(outcome, Err(ProtocolError::HandshakeTimeout(c)) if c == conn);
    let traced = trace.events("handshake_timeout").count() == 1 && trace.events("connect_active").count() == 0;
    if timed_out && traced {
        Ok("range-crossing handshake ends in HandshakeTimeout".into())
    } else {
        Err(format!("confirm returned {outcome:?}, timeout traced: {traced}"))
    }
}

fn protocol_conformance() -> Outcome {
    let mut bad = Vec::new();
    let (mut connects, mut relays) = (0, 0);
    for case in 0..1000 {
        let config = common::random_scenario(case);
        let result = engine::run(config).map_err(|e| format!("case {case}: {e}"))?;
        connects += result.trace.events("connect_active").count();
        relays += result.trace.events("relay_delivered").count();
        let v = audit::violations(&result.trace);
        if !v.is_empty() {
            bad.push(format!("case {case}: {}", v[0]));
        }
    }
    let timeout = handshake_timeout_fires();
    let detail = format!(
        "1000 random workloads ({connects} activations, {relays} relays), {} with violations{}; {}",
        bad.len(),
        bad.first().map(|b| format!(", first {b}")).unwrap_or_default(),
        timeout.as_ref().unwrap_or_else(|e| e)
    );
    check(bad.is_empty() && timeout.is_ok() && connects > 0 && relays > 0, detail)
}

fn determinism() -> Outcome {
    let mut configs: Vec<ScenarioConfig> = ALL_TABLES.iter().map(|t| t.preset()).collect();
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios");
    let mut files: Vec<_> = std::fs::read_dir(dir).map_err(|e| e.to_string())?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    files.sort();
    for path in files.iter().filter(|p| p.extension().is_some_and(|x| x == "toml")) {
        configs.push(ScenarioConfig::load(path).map_err(|e| e.to_string())?);
    }
    let mut mismatched = Vec::new();
    for c in &configs {
        let first = engine::run(c.clone()).map_err(|e| e.to_string())?;
        let second = engine::run(c.clone()).map_err(|e| e.to_string())?;
        if first.digest != second.digest || first.trace.digest() != first.digest {
            mismatched.push(c.name.clone());
        }
    }
    check(
        mismatched.is_empty(),
        format!("{} scenarios run twice, digest mismatches: {mismatched:?}", configs.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("table3_throughput", || throughput(&[TableId::Table3])),
        ("tables4_5_throughput", || throughput(&[TableId::Table4, TableId::Table5])),
        ("tables1_2_ordering", transmission_ordering),
        ("session_life_oracle", session_life_oracle),
        ("marcum_q_oracle", marcum_oracle),
        ("entropy_suite", entropy_suite),
        ("mobility_statistics", mobility_statistics),
        ("protocol_conformance", protocol_conformance),
        ("determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, criterion) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
