//! Re-reads a trace written by `cmanet simulate --out DIR`, audits the
//! protocol invariants and recomputes per-type throughput from it.
//!
//!     cargo run --example trace_audit -- DIR/trace.jsonl

use std::fs::File;
use std::io::BufReader;

use cmanet::audit;
use cmanet::experiments::throughput_preset;
use cmanet::linkmodel::RangeClass;
use cmanet::trace::Trace;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let trace = match std::env::args().nth(1) {
        Some(path) => Trace::read_jsonl(BufReader::new(File::open(path)?))?,
        None => cmanet::engine::run(throughput_preset(RangeClass::M100))?.trace,
    };
    println!("{} records, digest {}", trace.len(), trace.digest());
    let violations = audit::violations(&trace);
    if violations.is_empty() {
        println!("no protocol violations");
    }
    for v in &violations {
        println!("violation: {v}");
    }
    for (data_type, mbps) in audit::throughput_from_trace(&trace) {
        println!("{data_type:<6} {mbps:.4} Mbps");
    }
    Ok(())
}
