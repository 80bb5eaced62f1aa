//! Runs every independent oracle against the fast implementations.
//!
//!     cargo run --release --example oracles -- [session-life samples]

use std::time::Instant;

use cmanet::oracle::{check_chi_square, check_entropy, check_marcum, check_session_life};

fn main() {
    let samples = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10_000_000);
    let seed = 7;
    let checks: [(&str, Box<dyn Fn() -> cmanet::oracle::OracleReport>); 4] = [
        ("session_life", Box::new(move || check_session_life(samples, seed))),
        ("marcum_q1", Box::new(move || check_marcum(1000, seed))),
        ("entropy", Box::new(move || check_entropy(1000, seed))),
        ("chi_square", Box::new(move || check_chi_square(seed))),
    ];
    for (name, check) in checks {
        let started = Instant::now();
        let r = check();
        println!(
            "{name:<13} cases={:<5} max_dev={:.3e} tol={:.0e} {} ({:.2} s)\n    worst: {}",
            r.cases,
            r.max_deviation,
            r.tolerance,
            if r.passed { "ok" } else { "BREACH" },
            started.elapsed().as_secs_f64(),
            r.worst_case
        );
    }
}
